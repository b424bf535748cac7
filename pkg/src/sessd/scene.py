"""Scene container and its diffable text format.

One record per line::

    L <class> cx cy cz w l h r truncation occlusion bbox_height
    P x y z intensity

Floats are written with ``repr`` so a write/read cycle is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .geom import Box3D


class SceneFormatError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectLabel:
    cls: str
    box: Box3D
    truncation: float = 0.0
    occlusion: int = 0
    bbox_height: float = 100.0

    def __post_init__(self):
        if not 0.0 <= self.truncation <= 1.0:
            raise ValueError(f"truncation {self.truncation} outside [0, 1]")
        if self.occlusion not in (0, 1, 2, 3):
            raise ValueError(f"occlusion {self.occlusion} not in 0..3")


@dataclass
class Scene:
    points: np.ndarray  # (N, 4): x, y, z, intensity
    labels: list[ObjectLabel] = field(default_factory=list)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = np.zeros((0, 4))
        if pts.ndim != 2 or pts.shape[1] < 3:
            raise ValueError(f"points must be (N, >=3), got {pts.shape}")
        if pts.shape[1] == 3:
            pts = np.column_stack([pts, np.zeros(len(pts))])
        self.points = pts

    @property
    def boxes(self) -> np.ndarray:
        if not self.labels:
            return np.zeros((0, 7))
        return np.stack([lb.box.to_array() for lb in self.labels])

    def with_boxes(self, boxes: np.ndarray) -> list[ObjectLabel]:
        return [replace(lb, box=Box3D.from_array(b)) for lb, b in zip(self.labels, boxes)]

    def copy(self) -> "Scene":
        return Scene(self.points.copy(), list(self.labels))


def _f(x: float) -> str:
    return repr(float(x))


def format_scene(scene: Scene) -> str:
    lines = []
    for lb in scene.labels:
        b = lb.box
        vals = (b.cx, b.cy, b.cz, b.w, b.l, b.h, b.r, lb.truncation)
        lines.append(
            "L " + lb.cls + " " + " ".join(_f(v) for v in vals) + f" {lb.occlusion} " + _f(lb.bbox_height)
        )
    for p in scene.points:
        lines.append("P " + " ".join(_f(v) for v in p[:4]))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_scene(text: str, source: str = "<string>") -> Scene:
    labels, points = [], []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "P":
                if len(parts) != 5:
                    raise ValueError("point lines carry 4 numbers")
                points.append([float(v) for v in parts[1:]])
            elif parts[0] == "L":
                if len(parts) != 12:
                    raise ValueError("label lines carry a class name and 10 numbers")
                nums = [float(v) for v in parts[2:10]]
                box = Box3D(*nums[:7])
                labels.append(ObjectLabel(parts[1], box, nums[7], int(parts[10]), float(parts[11])))
            else:
                raise ValueError(f"unknown record type {parts[0]!r}")
        except ValueError as exc:
            raise SceneFormatError(f"{source}:{lineno}: {exc}") from None
    pts = np.array(points, dtype=np.float64).reshape(-1, 4)
    return Scene(pts, labels)


def write_scene(path, scene: Scene) -> None:
    Path(path).write_text(format_scene(scene))


def read_scene(path) -> Scene:
    p = Path(path)
    return parse_scene(p.read_text(), str(p))
