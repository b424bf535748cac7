"""Oriented boxes, BEV polygons, rotated IoU and rigid scene transforms.

Box convention: ``(cx, cy, cz)`` is the geometric center, ``l`` the extent
along the heading, ``w`` across it, ``h`` vertical; ``r`` is the BEV yaw,
counterclockwise from +x, kept in (-pi, pi]. Array form of a box is the row
``[cx, cy, cz, w, l, h, r]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernels
from ._kernels._pykernels import COLLINEAR_EPS, bev_corners, clip_convex, polygon_area

TWO_PI = 2.0 * math.pi


def normalize_angle(r: float) -> float:
    """Wrap an angle into (-pi, pi]; in-range values come back unchanged."""
    if -math.pi < r <= math.pi:
        return r
    return math.pi - (math.pi - r) % TWO_PI


def normalize_angles(r: np.ndarray) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    inside = (r > -np.pi) & (r <= np.pi)
    return np.where(inside, r, np.pi - np.mod(np.pi - r, TWO_PI))


@dataclass(frozen=True)
class Box3D:
    cx: float
    cy: float
    cz: float
    w: float
    l: float  # noqa: E741
    h: float
    r: float

    def __post_init__(self):
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box sizes must be positive, got w={self.w} l={self.l} h={self.h}")
        vals = (self.cx, self.cy, self.cz, self.w, self.l, self.h, self.r)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"box fields must be finite, got {vals}")
        object.__setattr__(self, "r", normalize_angle(float(self.r)))

    @classmethod
    def from_array(cls, row: Sequence[float]) -> "Box3D":
        return cls(*(float(v) for v in row[:7]))

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz, self.w, self.l, self.h, self.r])

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h


@dataclass(frozen=True)
class PolygonBEV:
    """Convex counterclockwise polygon in the ground plane."""

    vertices: tuple[tuple[float, float], ...]

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if not 3 <= len(verts) <= 16:
            raise ValueError(f"polygon needs 3..16 vertices, got {len(verts)}")
        if polygon_area(list(verts)) <= 0:
            raise ValueError("polygon must be counterclockwise with positive area")
        n = len(verts)
        for i in range(n):
            (x0, y0), (x1, y1), (x2, y2) = verts[i], verts[(i + 1) % n], verts[(i + 2) % n]
            if (x1 - x0) * (y2 - y1) - (y1 - y0) * (x2 - x1) < -COLLINEAR_EPS:
                raise ValueError("polygon is not convex")

    @property
    def area(self) -> float:
        return polygon_area(list(self.vertices))


def _dedupe(poly: list[tuple[float, float]], tol: float = 1e-12) -> list[tuple[float, float]]:
    out: list[tuple[float, float]] = []
    for p in poly:
        if not out or abs(p[0] - out[-1][0]) > tol or abs(p[1] - out[-1][1]) > tol:
            out.append(p)
    while len(out) > 1 and abs(out[0][0] - out[-1][0]) <= tol and abs(out[0][1] - out[-1][1]) <= tol:
        out.pop()
    return out


def _drop_collinear(poly: list[tuple[float, float]]) -> list[tuple[float, float]]:
    changed = True
    while changed and len(poly) >= 3:
        changed = False
        n = len(poly)
        for i in range(n):
            (x0, y0), (x1, y1), (x2, y2) = poly[i - 1], poly[i], poly[(i + 1) % n]
            if abs((x1 - x0) * (y2 - y1) - (y1 - y0) * (x2 - x1)) < COLLINEAR_EPS:
                del poly[i]
                changed = True
                break
    return poly


def box_corners_bev(box: Box3D) -> PolygonBEV:
    return PolygonBEV(tuple(bev_corners(box.cx, box.cy, box.w, box.l, box.r)))


def box_corners_3d(box: Box3D) -> np.ndarray:
    """(8, 3) corners: the four BEV corners at the bottom, then at the top."""
    bev = np.array(bev_corners(box.cx, box.cy, box.w, box.l, box.r))
    zlo, zhi = box.cz - 0.5 * box.h, box.cz + 0.5 * box.h
    bottom = np.column_stack([bev, np.full(4, zlo)])
    top = np.column_stack([bev, np.full(4, zhi)])
    return np.vstack([bottom, top])


def convex_intersection(a: PolygonBEV, b: PolygonBEV) -> PolygonBEV | None:
    """Intersection of two convex polygons, ``None`` when it has no area."""
    poly = clip_convex(list(a.vertices), list(b.vertices))
    poly = _drop_collinear(_dedupe(poly))
    if len(poly) < 3 or polygon_area(poly) <= 1e-12:
        return None
    return PolygonBEV(tuple(poly))


def iou_bev(a: Box3D, b: Box3D) -> float:
    return float(_kernels.iou_bev_matrix(a.to_array(), b.to_array())[0, 0])


def iou_3d(a: Box3D, b: Box3D) -> float:
    return float(_kernels.iou_3d_matrix(a.to_array(), b.to_array())[0, 0])


def iou_bev_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """All-pairs BEV IoU between (N, 7) and (M, 7) box arrays."""
    return _kernels.iou_bev_matrix(a, b)


def iou_3d_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _kernels.iou_3d_matrix(a, b)


def corners_3d_array(boxes: np.ndarray) -> np.ndarray:
    """Vectorised corners for (N, 7) boxes, shape (N, 8, 3)."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    c, s = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    hl, hw, hh = 0.5 * boxes[:, 4], 0.5 * boxes[:, 3], 0.5 * boxes[:, 5]
    du = np.array([1, -1, -1, 1, 1, -1, -1, 1], dtype=np.float64)
    dv = np.array([1, 1, -1, -1, 1, 1, -1, -1], dtype=np.float64)
    dz = np.array([-1, -1, -1, -1, 1, 1, 1, 1], dtype=np.float64)
    u = du[None, :] * hl[:, None]
    v = dv[None, :] * hw[:, None]
    x = boxes[:, 0:1] + u * c[:, None] - v * s[:, None]
    y = boxes[:, 1:2] + u * s[:, None] + v * c[:, None]
    z = boxes[:, 2:3] + dz[None, :] * hh[:, None]
    return np.stack([x, y, z], axis=-1)


def enclosing_diagonal(a: Box3D, b: Box3D) -> float:
    """Diagonal of the axis-aligned cuboid holding all 16 corners of both boxes."""
    pts = corners_3d_array(np.vstack([a.to_array(), b.to_array()])).reshape(-1, 3)
    ext = pts.max(axis=0) - pts.min(axis=0)
    return float(math.sqrt(float(ext @ ext)))


def points_in_box(points: np.ndarray, box: Box3D, tol: float = 1e-9) -> np.ndarray:
    """Boolean mask of points (N, >=3) inside ``box`` (closed, with tolerance)."""
    local = to_box_frame(points, box)
    half = np.array([0.5 * box.l, 0.5 * box.w, 0.5 * box.h])
    return np.all(np.abs(local) <= half + tol, axis=1)


def to_box_frame(points: np.ndarray, box: Box3D) -> np.ndarray:
    """Express points in the box frame: x along heading, y across, z up."""
    p = np.asarray(points, dtype=np.float64)[:, :3] - np.array([box.cx, box.cy, box.cz])
    c, s = math.cos(box.r), math.sin(box.r)
    return np.column_stack([c * p[:, 0] + s * p[:, 1], -s * p[:, 0] + c * p[:, 1], p[:, 2]])


def from_box_frame(local: np.ndarray, box: Box3D) -> np.ndarray:
    c, s = math.cos(box.r), math.sin(box.r)
    x = c * local[:, 0] - s * local[:, 1] + box.cx
    y = s * local[:, 0] + c * local[:, 1] + box.cy
    return np.column_stack([x, y, local[:, 2] + box.cz])


@dataclass(frozen=True)
class Transform:
    """Global similarity: scale, then optional y-mirror, then yaw, then shift."""

    rotation: float = 0.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    flip_y: bool = False
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        object.__setattr__(self, "translation", tuple(float(t) for t in self.translation))

    @classmethod
    def identity(cls) -> "Transform":
        return cls()

    def inverse(self) -> "Transform":
        # R(t) F s p + d  inverts to  R(t') F (1/s) q + d'  with t' = t under flip, -t otherwise
        rot = self.rotation if self.flip_y else -self.rotation
        inv = Transform(rotation=rot, flip_y=self.flip_y, scale=1.0 / self.scale)
        shifted = apply_transform_points(inv, np.array([self.translation]))[0]
        return Transform(rotation=rot, translation=tuple(-shifted), flip_y=self.flip_y, scale=1.0 / self.scale)


def apply_transform_points(t: Transform, points: np.ndarray) -> np.ndarray:
    """Transform the xyz columns of (N, >=3) points; extra columns pass through."""
    pts = np.array(points, dtype=np.float64, copy=True)
    xyz = pts[:, :3] * t.scale
    if t.flip_y:
        xyz[:, 1] = -xyz[:, 1]
    c, s = math.cos(t.rotation), math.sin(t.rotation)
    x = c * xyz[:, 0] - s * xyz[:, 1]
    y = s * xyz[:, 0] + c * xyz[:, 1]
    pts[:, 0] = x + t.translation[0]
    pts[:, 1] = y + t.translation[1]
    pts[:, 2] = xyz[:, 2] + t.translation[2]
    return pts


def apply_transform_boxes(t: Transform, boxes: np.ndarray) -> np.ndarray:
    """Vectorised ``apply_transform`` on (N, 7) box rows."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    out = boxes.copy()
    out[:, :3] = apply_transform_points(t, boxes[:, :3])
    out[:, 3:6] = boxes[:, 3:6] * t.scale
    r = -boxes[:, 6] if t.flip_y else boxes[:, 6]
    out[:, 6] = normalize_angles(r + t.rotation)
    return out


def apply_transform(t: Transform, box: Box3D) -> Box3D:
    return Box3D.from_array(apply_transform_boxes(t, box.to_array())[0])
