"""KITTI-style average precision for oriented 3D boxes.

Ground truths are bucketed into easy / moderate / hard. Evaluating a level
counts every object that qualifies for that level or an easier one; objects
that only qualify for a harder level, fail every level, or belong to another
class are "don't care": a detection matched to one of them is neither a true
nor a false positive.

Within a scene detections are matched greedily by descending score, each
ground truth at most once, requiring IoU >= the threshold. Because greedy
matching of a score prefix is the prefix of the full greedy matching, one
pass per scene yields the TP/FP flags for every score threshold, and the
per-scene lists merge by concatenation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .detections import Detections
from .geom import iou_3d_matrix, iou_bev_matrix
from .scene import ObjectLabel

DIFFICULTIES = ("easy", "moderate", "hard")
# minimum 2D height (px), maximum occlusion level, maximum truncation
_LEVELS = {"easy": (40.0, 0, 0.15), "moderate": (25.0, 1, 0.30), "hard": (25.0, 2, 0.50)}
MODES = ("bev", "threed")


@dataclass(frozen=True)
class EvalConfig:
    iou_threshold: float = 0.7
    recall_points: int = 40
    difficulty: str = "moderate"
    mode: str = "threed"
    cls: str = "Car"

    def __post_init__(self):
        if self.recall_points not in (11, 40):
            raise ValueError("recall_points must be 11 or 40")
        if self.difficulty not in DIFFICULTIES:
            raise ValueError(f"difficulty must be one of {DIFFICULTIES}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if not 0.0 < self.iou_threshold <= 1.0:
            raise ValueError("iou_threshold must lie in (0, 1]")


@dataclass
class PrCurve:
    thresholds: np.ndarray  # descending scores, one per tie group
    precision: np.ndarray
    recall: np.ndarray
    ap: float = 0.0
    n_gt: int = 0


def difficulty_of(label: ObjectLabel) -> str:
    for name in DIFFICULTIES:
        min_h, max_occ, max_trunc = _LEVELS[name]
        if label.bbox_height >= min_h and label.occlusion <= max_occ and label.truncation <= max_trunc:
            return name
    return "ignored"


def _cares(labels: list[ObjectLabel], cfg: EvalConfig) -> np.ndarray:
    limit = DIFFICULTIES.index(cfg.difficulty)
    out = np.zeros(len(labels), dtype=bool)
    for i, lb in enumerate(labels):
        d = difficulty_of(lb)
        out[i] = lb.cls.lower() == cfg.cls.lower() and d != "ignored" and DIFFICULTIES.index(d) <= limit
    return out


def match_scene(dets: Detections, labels: list[ObjectLabel], cfg: EvalConfig):
    """Greedy matching for one scene: returns (scores, is_tp) of counted detections and #care gts."""
    care = _cares(labels, cfg)
    n = len(dets)
    scores = dets.scores
    if n == 0:
        return np.zeros(0), np.zeros(0, dtype=bool), int(care.sum())
    order = np.lexsort((np.arange(n), -dets.logits))
    if labels:
        gtb = np.stack([lb.box.to_array() for lb in labels])
        iou = (iou_bev_matrix if cfg.mode == "bev" else iou_3d_matrix)(dets.boxes, gtb)
    else:
        iou = np.zeros((n, 0))
    taken = np.zeros(len(labels), dtype=bool)
    out_s, out_tp = [], []
    for d in order:
        cand = np.where(taken, -1.0, iou[d]) if len(labels) else np.zeros(0)
        g = int(cand.argmax()) if len(cand) else -1
        if g >= 0 and cand[g] >= cfg.iou_threshold:
            taken[g] = True
            if not care[g]:
                continue  # matched a don't-care object: not counted either way
            out_s.append(scores[d])
            out_tp.append(True)
        else:
            out_s.append(scores[d])
            out_tp.append(False)
    return np.asarray(out_s, dtype=np.float64), np.asarray(out_tp, dtype=bool), int(care.sum())


def pr_curve(scores: np.ndarray, is_tp: np.ndarray, n_gt: int) -> PrCurve:
    """Precision/recall at every distinct score threshold (tie groups enter together)."""
    if len(scores) == 0 or n_gt == 0:
        return PrCurve(np.zeros(0), np.zeros(0), np.zeros(0), 0.0, n_gt)
    order = np.argsort(-scores, kind="stable")
    s, tp = scores[order], is_tp[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    last = np.flatnonzero(np.append(s[1:] != s[:-1], True))
    prec = ctp[last] / (ctp[last] + cfp[last])
    rec = ctp[last] / n_gt
    return PrCurve(s[last], prec, rec, 0.0, n_gt)


def interpolated_ap(curve: PrCurve, recall_points: int) -> float:
    if recall_points == 40:
        samples = np.arange(1, 41) / 40.0
    elif recall_points == 11:
        samples = np.arange(11) / 10.0
    else:
        raise ValueError("recall_points must be 11 or 40")
    if len(curve.recall) == 0:
        return 0.0
    # max precision at recall >= r, via a reversed running maximum
    best = np.maximum.accumulate(curve.precision[::-1])[::-1]
    idx = np.searchsorted(curve.recall, samples - 1e-12, side="left")
    vals = np.where(idx < len(best), best[np.minimum(idx, len(best) - 1)], 0.0)
    return float(vals.mean())


def average_precision(preds: list[Detections], gts: list[list[ObjectLabel]], cfg: EvalConfig = EvalConfig()):
    """AP and PR curve over a set of scenes; ``preds[i]`` pairs with ``gts[i]``."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} scenes")
    all_s, all_tp, n_gt = [], [], 0
    for d, g in zip(preds, gts):
        s, tp, n = match_scene(d, g, cfg)
        all_s.append(s)
        all_tp.append(tp)
        n_gt += n
    curve = pr_curve(np.concatenate(all_s) if all_s else np.zeros(0),
                     np.concatenate(all_tp) if all_tp else np.zeros(0, bool), n_gt)
    curve.ap = interpolated_ap(curve, cfg.recall_points)
    return curve.ap, curve


def mean_ap(aps) -> float:
    aps = list(aps)
    if len(aps) != 3:
        raise ValueError("mean_ap takes one AP per difficulty level")
    return float(sum(aps) / 3.0)


@dataclass
class EvalTable:
    """AP keyed by (mode, recall_points, difficulty)."""

    aps: dict[tuple[str, int, str], float] = field(default_factory=dict)

    def mean(self, mode: str, recall_points: int) -> float:
        return mean_ap(self.aps[(mode, recall_points, d)] for d in DIFFICULTIES)

    def format(self) -> str:
        lines = [f"{'metric':<12}{'easy':>10}{'moderate':>10}{'hard':>10}{'mAP':>10}"]
        for mode in ("threed", "bev"):
            for rp in (40, 11):
                name = f"{'3D' if mode == 'threed' else 'BEV'} R{rp}"
                vals = [self.aps[(mode, rp, d)] for d in DIFFICULTIES]
                lines.append(f"{name:<12}" + "".join(f"{v:>10.4f}" for v in vals) + f"{self.mean(mode, rp):>10.4f}")
        return "\n".join(lines)


def evaluate(preds: list[Detections], gts: list[list[ObjectLabel]], iou_threshold: float = 0.7) -> EvalTable:
    table = EvalTable()
    for mode in MODES:
        for rp in (40, 11):
            for diff in DIFFICULTIES:
                ap, _ = average_precision(preds, gts, EvalConfig(iou_threshold, rp, diff, mode))
                table.aps[(mode, rp, diff)] = ap
    return table


def write_pr_csv(path, curve: PrCurve) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "precision", "recall"])
        for t, p, r in zip(curve.thresholds, curve.precision, curve.recall):
            w.writerow([repr(float(t)), repr(float(p)), repr(float(r))])
