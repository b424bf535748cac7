"""Synthetic driving scenes: a few cars seen from a sensor at the origin.

Cars sit on a flat ground plane. Only the faces turned towards the sensor and
the roof receive points, with density falling off with range, and every point
gets 2 cm Gaussian noise. Small clutter blobs and ground returns are mixed in
so the classifier has something to reject.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geom import Box3D, from_box_frame
from ..scene import ObjectLabel, Scene

GROUND_Z = -1.73
FOCAL_PX = 721.5


@dataclass(frozen=True)
class SceneSpec:
    extent: float = 10.0  # scenes span [-extent, extent]^2 in BEV
    n_cars: tuple[int, int] = (2, 4)
    min_gap: float = 6.5  # minimum BEV center distance between cars
    min_range: float = 4.0  # keep cars away from the sensor
    width: tuple[float, float] = (1.5, 1.9)
    length: tuple[float, float] = (3.5, 4.6)
    height: tuple[float, float] = (1.4, 1.7)
    density: float = 20.0  # points per m^2 at 10 m
    noise: float = 0.02
    n_clutter: tuple[int, int] = (1, 4)
    n_ground: int = 300


def _sample_face(rng, box: Box3D, axis: int, sign: float, n: int, noise: float) -> np.ndarray:
    half = 0.5 * np.array([box.l, box.w, box.h])
    u = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    if axis != 2:
        # nothing below the sills: keeps object points clear of the ground band
        u[:, 2] = rng.uniform(min(-half[2] + 0.3, half[2]), half[2], size=n)
    u[:, axis] = sign * half[axis]
    pts = from_box_frame(u, box)
    return pts + rng.normal(0.0, noise, size=pts.shape)


def sample_box_surface(rng, box: Box3D, spec: SceneSpec, sensor=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Points on the sensor-facing sides and the roof of ``box``."""
    sensor = np.asarray(sensor, dtype=np.float64)
    dist = max(math.hypot(box.cx - sensor[0], box.cy - sensor[1]), 3.0)
    per_m2 = spec.density * (10.0 / dist) ** 2
    c, s = math.cos(box.r), math.sin(box.r)
    dims = {0: (box.w, box.h), 1: (box.l, box.h)}
    chunks = []
    for axis, normal in ((0, np.array([c, s])), (1, np.array([-s, c]))):
        extent = box.l if axis == 0 else box.w
        for sign in (1.0, -1.0):
            face_c = np.array([box.cx, box.cy]) + sign * 0.5 * extent * normal
            if np.dot(sign * normal, face_c - sensor[:2]) >= 0:
                continue
            a, b = dims[axis]
            chunks.append(_sample_face(rng, box, axis, sign, max(int(per_m2 * a * b), 3), spec.noise))
    chunks.append(_sample_face(rng, box, 2, 1.0, max(int(0.5 * per_m2 * box.l * box.w), 3), spec.noise))
    return np.vstack(chunks)


def _place_cars(rng, spec: SceneSpec) -> list[Box3D]:
    n = int(rng.integers(spec.n_cars[0], spec.n_cars[1] + 1))
    lim = spec.extent - 2.0
    boxes: list[Box3D] = []
    for _ in range(200 * n):
        if len(boxes) == n:
            break
        x, y = rng.uniform(-lim, lim, size=2)
        if math.hypot(x, y) < spec.min_range:
            continue
        if any(math.hypot(x - b.cx, y - b.cy) < spec.min_gap for b in boxes):
            continue
        h = rng.uniform(*spec.height)
        boxes.append(Box3D(x, y, GROUND_Z + 0.5 * h, rng.uniform(*spec.width), rng.uniform(*spec.length), h,
                           rng.uniform(-math.pi, math.pi)))
    return boxes


def make_scene(rng: np.random.Generator, spec: SceneSpec = SceneSpec()) -> Scene:
    boxes = _place_cars(rng, spec)
    pts, labels = [], []
    for b in boxes:
        pts.append(sample_box_surface(rng, b, spec))
        depth = max(math.hypot(b.cx, b.cy), 1.0)
        occ = int(rng.choice(3, p=[0.6, 0.25, 0.15]))
        labels.append(ObjectLabel("Car", b, 0.0, occ, FOCAL_PX * b.h / depth))
    lim = spec.extent - 0.5
    for _ in range(int(rng.integers(spec.n_clutter[0], spec.n_clutter[1] + 1))):
        for _ in range(50):
            x, y = rng.uniform(-lim, lim, size=2)
            if all(math.hypot(x - b.cx, y - b.cy) > 4.0 for b in boxes) and math.hypot(x, y) > 2.0:
                break
        h = rng.uniform(0.5, 2.0)
        blob = Box3D(x, y, GROUND_Z + 0.5 * h, rng.uniform(0.2, 1.0), rng.uniform(0.2, 1.0), h,
                     rng.uniform(-math.pi, math.pi))
        pts.append(sample_box_surface(rng, blob, spec))
    ground = np.column_stack([
        rng.uniform(-spec.extent, spec.extent, size=(spec.n_ground, 2)),
        GROUND_Z + rng.normal(0.0, spec.noise, size=spec.n_ground),
    ])
    pts.append(ground)
    xyz = np.vstack(pts)
    inside = np.all(np.abs(xyz[:, :2]) <= spec.extent, axis=1)
    xyz = xyz[inside]
    intensity = rng.uniform(0.0, 1.0, size=len(xyz))
    return Scene(np.column_stack([xyz, intensity]), labels)


def make_dataset(n: int, seed: int, spec: SceneSpec = SceneSpec()) -> list[Scene]:
    rng = np.random.default_rng(seed)
    return [make_scene(rng, spec) for _ in range(n)]
