"""IoU-based pairing of student predictions with teacher soft targets.

The default ``stu_filter`` strategy: drop low-confidence boxes on both sides,
drop student/teacher pairs that do not overlap by more than ``tau_i``, then
give each surviving student box its best-overlapping teacher box. The
``nms_filter`` and ``gt_filter`` variants add one extra teacher-side filter
before pairing.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .detections import Detections, sigmoid
from .geom import iou_3d_matrix, iou_bev_matrix


class Strategy(str, Enum):
    STU_FILTER = "stu_filter"
    NMS_FILTER = "nms_filter"
    GT_FILTER = "gt_filter"


@dataclass(frozen=True)
class MatchConfig:
    tau_c: float = 0.3
    tau_i: float = 0.7
    strategy: Strategy = Strategy.STU_FILTER
    nms_thresh: float = 0.7
    iou_mode: str = "bev"  # or "3d"

    def __post_init__(self):
        for name in ("tau_c", "tau_i", "nms_thresh"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        if self.iou_mode not in ("bev", "3d"):
            raise ValueError(f"iou_mode must be 'bev' or '3d', got {self.iou_mode!r}")


@dataclass
class MatchSet:
    """Student/teacher index pairs with their IoU.

    ``n_initial`` counts the confident student boxes considered for pairing,
    ``n_final`` the ones that found a teacher box above the IoU threshold.
    """

    pairs: list[tuple[int, int, float]] = field(default_factory=list)
    n_initial: int = 0

    @property
    def n_final(self) -> int:
        return len(self.pairs)

    @property
    def student_indices(self) -> np.ndarray:
        return np.array([p[0] for p in self.pairs], dtype=np.int64)

    @property
    def teacher_indices(self) -> np.ndarray:
        return np.array([p[1] for p in self.pairs], dtype=np.int64)


def _iou(mode: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return iou_bev_matrix(a, b) if mode == "bev" else iou_3d_matrix(a, b)


def rotated_nms(dets: Detections, iou_thresh: float, scores: np.ndarray | None = None) -> np.ndarray:
    """Greedy BEV NMS; returns kept indices in descending-score order.

    Boxes with IoU strictly above ``iou_thresh`` to an already-kept box are
    suppressed. Equal scores keep the lower index first.
    """
    if not 0.0 <= iou_thresh <= 1.0:
        raise ValueError("iou_thresh must lie in [0, 1]")
    n = len(dets)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    s = dets.logits if scores is None else np.asarray(scores)
    order = np.lexsort((np.arange(n), -s))
    ious = iou_bev_matrix(dets.boxes[order], dets.boxes[order])
    alive = np.ones(n, dtype=bool)
    keep = []
    for pos in range(n):
        if not alive[pos]:
            continue
        keep.append(order[pos])
        alive &= ~(ious[pos] > iou_thresh)
    return np.array(keep, dtype=np.int64)


def _pair(student: Detections, teacher: Detections, s_idx, t_idx, cfg: MatchConfig) -> MatchSet:
    ms = MatchSet(n_initial=len(s_idx))
    if len(s_idx) == 0 or len(t_idx) == 0:
        return ms
    ious = _iou(cfg.iou_mode, student.boxes[s_idx], teacher.boxes[t_idx])
    ious = np.where(ious > cfg.tau_i, ious, -1.0)
    # teacher candidates sorted by original index so argmax ties go to the lowest one
    t_order = np.argsort(t_idx, kind="stable")
    ious = ious[:, t_order]
    t_sorted = np.asarray(t_idx)[t_order]
    best = ious.argmax(axis=1)
    for row, si in enumerate(s_idx):
        v = ious[row, best[row]]
        if v > cfg.tau_i:
            ms.pairs.append((int(si), int(t_sorted[best[row]]), float(v)))
    return ms


def _confident(dets: Detections, tau_c: float) -> np.ndarray:
    return np.flatnonzero(sigmoid(dets.logits) >= tau_c)


def match_soft_targets(student: Detections, teacher: Detections, cfg: MatchConfig = MatchConfig()) -> MatchSet:
    """Student-filtered pairing (confidence, IoU threshold, per-student argmax)."""
    return _pair(student, teacher, _confident(student, cfg.tau_c), _confident(teacher, cfg.tau_c), cfg)


def match_nms_filter(student: Detections, teacher: Detections, cfg: MatchConfig = MatchConfig()) -> MatchSet:
    t_idx = _confident(teacher, cfg.tau_c)
    if len(t_idx):
        kept = rotated_nms(teacher.subset(t_idx), cfg.nms_thresh)
        t_idx = np.sort(t_idx[kept])
    return _pair(student, teacher, _confident(student, cfg.tau_c), t_idx, cfg)


def match_gt_filter(
    student: Detections, teacher: Detections, gts: np.ndarray, cfg: MatchConfig = MatchConfig()
) -> MatchSet:
    t_idx = _confident(teacher, cfg.tau_c)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 7)
    if len(t_idx):
        if len(gts) == 0:
            t_idx = t_idx[:0]
        else:
            overlap = _iou(cfg.iou_mode, teacher.boxes[t_idx], gts).max(axis=1) > 0.0
            t_idx = t_idx[overlap]
    return _pair(student, teacher, _confident(student, cfg.tau_c), t_idx, cfg)


def match(student: Detections, teacher: Detections, cfg: MatchConfig, gts: np.ndarray | None = None) -> MatchSet:
    """Dispatch on ``cfg.strategy``; ``gts`` is required for ``gt_filter``."""
    if cfg.strategy is Strategy.GT_FILTER:
        if gts is None:
            raise ValueError("gt_filter needs ground-truth boxes")
        return match_gt_filter(student, teacher, gts, cfg)
    if cfg.strategy is Strategy.NMS_FILTER:
        return match_nms_filter(student, teacher, cfg)
    return match_soft_targets(student, teacher, cfg)
