"""Shape-aware point-cloud augmentation and global/local scene transforms.

Each labeled object's points are split into six pyramids, one per box face,
with the box centroid as the common apex. Three operators act on one pyramid
at a time: dropout (remove it), swap (exchange it with the same pyramid of
another object) and sparsify (keep a farthest-point subsample).

Every random decision is written to an :class:`AugRecord`; replaying the
record on the original scene reproduces the augmented scene bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .geom import (
    Box3D,
    Transform,
    apply_transform,
    apply_transform_boxes,
    apply_transform_points,
    from_box_frame,
    iou_bev_matrix,
    points_in_box,
    to_box_frame,
)
from .scene import Scene

FACES = ("+x", "-x", "+y", "-y", "+z", "-z")
OPS = ("dropout", "swap", "sparsify", "mixup")


class PointOutsideBox(ValueError):
    pass


class InvalidK(ValueError):
    pass


@dataclass(frozen=True)
class AugConfig:
    p1: float = 0.25  # dropout
    p2: float = 0.05  # swap
    p3: float = 0.10  # sparsify
    sparsify_keep_ratio: float = 0.5
    rot_range: tuple[float, float] = (-math.pi / 4, math.pi / 4)
    trans_range: tuple[float, float, float] = (0.2, 0.2, 0.2)
    scale_range: tuple[float, float] = (0.95, 1.05)
    flip_prob: float = 0.5
    local_rot_range: tuple[float, float] = (-math.pi / 20, math.pi / 20)
    local_trans_range: tuple[float, float, float] = (0.25, 0.25, 0.0)
    seed: int = 0

    def __post_init__(self):
        for name in ("p1", "p2", "p3", "flip_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if not 0.0 < self.sparsify_keep_ratio <= 1.0:
            raise ValueError("sparsify_keep_ratio must lie in (0, 1]")
        if self.rot_range[0] > self.rot_range[1] or self.scale_range[0] > self.scale_range[1]:
            raise ValueError("ranges must be (low, high) with low <= high")
        if self.scale_range[0] <= 0:
            raise ValueError("scale range must be positive")


@dataclass(frozen=True)
class PyramidPartition:
    assignments: np.ndarray  # (N,) face index 0..5

    def members(self, face: int) -> np.ndarray:
        return np.flatnonzero(self.assignments == face)


@dataclass(frozen=True)
class AugOp:
    obj: int
    op: str
    face: int
    partner: int | None = None
    seed: int = 0

    def to_line(self) -> str:
        partner = "" if self.partner is None else str(self.partner)
        return f"obj={self.obj} op={self.op} face={self.face} partner={partner} seed={self.seed}"

    @classmethod
    def from_line(cls, line: str) -> "AugOp":
        kv = dict(tok.split("=", 1) for tok in line.split())
        missing = {"obj", "op", "face", "seed"} - kv.keys()
        if missing:
            raise ValueError(f"op line lacks {sorted(missing)}: {line!r}")
        if kv["op"] not in OPS:
            raise ValueError(f"unknown op {kv['op']!r}")
        partner = kv.get("partner", "")
        return cls(int(kv["obj"]), kv["op"], int(kv["face"]), int(partner) if partner else None, int(kv["seed"]))


@dataclass
class AugRecord:
    transform: Transform | None = None
    ops: list[AugOp] = field(default_factory=list)

    def to_text(self) -> str:
        lines = []
        t = self.transform
        if t is not None:
            tx, ty, tz = (repr(v) for v in t.translation)
            lines.append(
                f"global rotation={t.rotation!r} translation={tx},{ty},{tz} "
                f"flip_y={int(t.flip_y)} scale={t.scale!r}"
            )
        lines.extend(op.to_line() for op in self.ops)
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str) -> "AugRecord":
        rec = cls()
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("global "):
                kv = dict(tok.split("=", 1) for tok in line.split()[1:])
                rec.transform = Transform(
                    rotation=float(kv["rotation"]),
                    translation=tuple(float(v) for v in kv["translation"].split(",")),
                    flip_y=kv["flip_y"] == "1",
                    scale=float(kv["scale"]),
                )
            else:
                rec.ops.append(AugOp.from_line(line))
        return rec


# -- per-object operators -------------------------------------------------------

def partition_pyramids(points: np.ndarray, box: Box3D, tol: float = 1e-6) -> PyramidPartition:
    """Assign each in-box point to the face pyramid holding it.

    In normalised box coordinates u in [-1, 1]^3 a point belongs to the face of
    largest |u_i|; ties go to the earlier face in (+x, -x, +y, -y, +z, -z).
    """
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) == 0:
        return PyramidPartition(np.zeros(0, dtype=np.int64))
    u = to_box_frame(pts, box) / (0.5 * np.array([box.l, box.w, box.h]))
    a = np.abs(u)
    if (a > 1.0 + tol).any():
        bad = int(np.flatnonzero((a > 1.0 + tol).any(axis=1))[0])
        raise PointOutsideBox(f"point {bad} at normalised {u[bad].tolist()} lies outside the box")
    axis = a.argmax(axis=1)
    neg = u[np.arange(len(u)), axis] < 0
    return PyramidPartition((2 * axis + neg).astype(np.int64))


def dropout_pyramid(points: np.ndarray, partition: PyramidPartition, face: int, rng=None) -> np.ndarray:
    _check_face(face)
    return np.asarray(points)[partition.assignments != face]


def swap_pyramids(points_a, box_a: Box3D, points_b, box_b: Box3D, face: int):
    """Exchange pyramid ``face`` between two objects through normalised box coordinates."""
    _check_face(face)
    points_a, points_b = np.asarray(points_a, dtype=np.float64), np.asarray(points_b, dtype=np.float64)
    in_a = partition_pyramids(points_a, box_a).assignments == face
    in_b = partition_pyramids(points_b, box_b).assignments == face
    a_to_b = _remap(points_a[in_a], box_a, box_b)
    b_to_a = _remap(points_b[in_b], box_b, box_a)
    return (
        np.concatenate([points_a[~in_a], b_to_a]),
        np.concatenate([points_b[~in_b], a_to_b]),
    )


def _remap(points: np.ndarray, src: Box3D, dst: Box3D) -> np.ndarray:
    out = points.copy()
    if len(points) == 0:
        return out
    ratio = np.array([dst.l / src.l, dst.w / src.w, dst.h / src.h])
    out[:, :3] = from_box_frame(to_box_frame(points, src) * ratio, dst)
    return out


def farthest_point_sampling(points: np.ndarray, k: int, seed_index: int = 0) -> np.ndarray:
    """Greedy max-min-distance subset of size ``k`` starting at ``seed_index``."""
    pts = np.asarray(points, dtype=np.float64)
    n = len(pts)
    if not 1 <= k <= n:
        raise InvalidK(f"k={k} must satisfy 1 <= k <= n={n}")
    if not 0 <= seed_index < n:
        raise InvalidK(f"seed_index {seed_index} outside [0, {n})")
    return _kernels.farthest_point_sampling(np.ascontiguousarray(pts[:, :3]), int(k), int(seed_index))


def sparsify_pyramid(points, partition: PyramidPartition, face: int, keep_ratio: float, rng) -> np.ndarray:
    """Keep ceil(keep_ratio * n) farthest-point samples of one pyramid; order is preserved."""
    _check_face(face)
    if not 0.0 < keep_ratio <= 1.0:
        raise ValueError("keep_ratio must lie in (0, 1]")
    pts = np.asarray(points)
    members = partition.members(face)
    n = len(members)
    if n == 0:
        return pts.copy()
    k = max(1, math.ceil(keep_ratio * n))
    start = int(rng.permutation(n)[0])
    chosen = farthest_point_sampling(pts[members], k, start)
    keep = partition.assignments != face
    keep[members[chosen]] = True
    return pts[keep]


def _check_face(face: int) -> None:
    if not 0 <= face < 6:
        raise ValueError(f"face {face} not in 0..5")


# -- scene level -------------------------------------------------------------------

def _owners(points: np.ndarray, boxes: list[Box3D]) -> np.ndarray:
    owner = np.full(len(points), -1, dtype=np.int64)
    for i, box in enumerate(boxes):
        m = points_in_box(points, box, tol=0.0) & (owner < 0)
        owner[m] = i
    return owner


def apply_record(scene: Scene, record: AugRecord, keep_ratio: float = 0.5) -> Scene:
    """Replay a recorded augmentation on ``scene``."""
    points, labels = scene.points, list(scene.labels)
    if record.transform is not None:
        points = apply_transform_points(record.transform, points)
        labels = scene.with_boxes(apply_transform_boxes(record.transform, scene.boxes))
    if not record.ops:
        return Scene(points, labels)
    boxes = [lb.box for lb in labels]
    owner = _owners(points, boxes)
    obj_pts = [points[owner == i] for i in range(len(boxes))]
    touched: set[int] = set()
    for op in record.ops:
        i = op.obj
        if not 0 <= i < len(boxes):
            raise ValueError(f"op references object {i}, scene has {len(boxes)}")
        if op.op == "dropout":
            part = partition_pyramids(obj_pts[i], boxes[i])
            obj_pts[i] = dropout_pyramid(obj_pts[i], part, op.face)
        elif op.op == "swap":
            j = op.partner
            if j is None or not 0 <= j < len(boxes) or j == i:
                raise ValueError(f"swap on object {i} has invalid partner {j}")
            obj_pts[i], obj_pts[j] = swap_pyramids(obj_pts[i], boxes[i], obj_pts[j], boxes[j], op.face)
            touched.add(j)
        elif op.op == "sparsify":
            part = partition_pyramids(obj_pts[i], boxes[i])
            obj_pts[i] = sparsify_pyramid(obj_pts[i], part, op.face, keep_ratio, np.random.default_rng(op.seed))
        else:
            raise NotImplementedError(f"op {op.op!r} is reserved and cannot be replayed")
        touched.add(i)
    untouched = np.isin(owner, sorted(touched), invert=True)
    pieces = [points[untouched]] + [obj_pts[i] for i in sorted(touched)]
    return Scene(np.concatenate(pieces), labels)


def draw_shape_aware_ops(scene: Scene, cfg: AugConfig, rng: np.random.Generator) -> list[AugOp]:
    """Independent Bernoulli draws per object in the order dropout, swap, sparsify."""
    ops = []
    n = len(scene.labels)
    for i in range(n):
        if rng.random() < cfg.p1:
            ops.append(AugOp(i, "dropout", int(rng.integers(6)), None, _seed(rng)))
        if rng.random() < cfg.p2 and n > 1:
            partner = int(rng.integers(n - 1))
            partner += partner >= i
            ops.append(AugOp(i, "swap", int(rng.integers(6)), partner, _seed(rng)))
        if rng.random() < cfg.p3:
            ops.append(AugOp(i, "sparsify", int(rng.integers(6)), None, _seed(rng)))
    return ops


def _seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


def shape_aware_augment(scene: Scene, cfg: AugConfig, rng: np.random.Generator):
    record = AugRecord(None, draw_shape_aware_ops(scene, cfg, rng))
    return apply_record(scene, record, cfg.sparsify_keep_ratio), record


def draw_transform(cfg: AugConfig, rng: np.random.Generator) -> Transform:
    rot = float(rng.uniform(*cfg.rot_range))
    flip = bool(rng.random() < cfg.flip_prob)
    scale = float(rng.uniform(*cfg.scale_range))
    trans = tuple(float(rng.uniform(-t, t)) for t in cfg.trans_range)
    return Transform(rotation=rot, translation=trans, flip_y=flip, scale=scale)


def global_augment(scene: Scene, cfg: AugConfig, rng: np.random.Generator, transform: Transform | None = None):
    """Apply one random similarity to all points and label boxes; returns it too."""
    t = draw_transform(cfg, rng) if transform is None else transform
    points = apply_transform_points(t, scene.points)
    labels = scene.with_boxes(apply_transform_boxes(t, scene.boxes))
    return Scene(points, labels), t


def local_augment(scene: Scene, cfg: AugConfig, rng: np.random.Generator) -> Scene:
    """Jitter each object (points and box) about its own center; moves that collide are skipped."""
    points = scene.points.copy()
    labels = list(scene.labels)
    boxes = [lb.box for lb in labels]
    owner = _owners(points, boxes)
    for i, box in enumerate(boxes):
        rot = float(rng.uniform(*cfg.local_rot_range))
        d = [float(rng.uniform(-t, t)) for t in cfg.local_trans_range]
        t_to = Transform(translation=(-box.cx, -box.cy, -box.cz))
        t_back = Transform(rotation=rot, translation=(box.cx + d[0], box.cy + d[1], box.cz + d[2]))
        new_box = apply_transform(t_back, apply_transform(t_to, box))
        others = np.array([b.to_array() for j, b in enumerate(boxes) if j != i]).reshape(-1, 7)
        if len(others) and iou_bev_matrix(new_box.to_array(), others).max() > 0:
            continue
        m = owner == i
        points[m] = apply_transform_points(t_back, apply_transform_points(t_to, points[m]))
        boxes[i] = new_box
        labels[i] = replace(labels[i], box=new_box)
    return Scene(points, labels)
