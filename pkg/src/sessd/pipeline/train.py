"""Supervised pre-training and the teacher/student self-ensembling loop.

One loop serves both modes. Per step the student sees the scene after a
random global transform (and, optionally, shape-aware augmentation) and is
supervised by the transformed labels. In self-ensembling mode the teacher
also runs on the untouched scene; its boxes are pushed through the same
global transform and become soft targets for the consistency losses. Only
the student is optimised; the teacher follows by EMA.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np

from ..augment import AugConfig, AugRecord, apply_record, draw_shape_aware_ops, draw_transform
from ..detections import Detections
from ..geom import Transform, apply_transform_boxes
from ..losses import (
    LossParts,
    LossWeights,
    consistency_box_loss,
    consistency_cls_loss,
    cosine_lr,
    direction_loss,
    direction_target,
    focal_loss,
    mu_ramp,
    odiou_loss_batch,
    smooth_l1_box_loss,
    student_total_loss,
)
from ..matching import MatchConfig, match, rotated_nms
from ..scene import Scene
from .detector import (
    ToyDetector,
    assign_targets,
    cell_features,
    detector_backward,
    forward_features,
    postprocess,
)
from .optim import AdamState, EmaState, adam_step, ema_update
from .voxel import voxelize

METRIC_FIELDS = ("step", "loss_cls", "loss_box", "loss_dir", "loss_cons_cls", "loss_cons_box", "mu_t", "lr")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 3e-3
    lr_min: float = 1e-4
    seed: int = 0
    weights: LossWeights = LossWeights()
    match: MatchConfig = MatchConfig()
    aug: AugConfig = AugConfig()
    box_loss: str = "odiou"  # or "smooth_l1"
    global_aug: bool = True
    shape_aware: bool = True
    consistency: bool = True
    ema_decay: float = 0.999
    ramp_epochs: float = 15.0
    teacher_nms: bool = False
    mu_override: float | None = None  # pin mu_t instead of ramping it

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.lr < 0 or self.lr_min < 0:
            raise ValueError("learning rates must be >= 0")
        if self.box_loss not in ("odiou", "smooth_l1"):
            raise ValueError(f"box_loss must be 'odiou' or 'smooth_l1', got {self.box_loss!r}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")

    def describe(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "__dataclass_fields__"):
                v = {g.name: getattr(v, g.name) for g in fields(v)}
            out[f.name] = v
        return out


@dataclass
class TrainResult:
    student: ToyDetector
    teacher: ToyDetector | None
    metrics: list[dict] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)


def supervised_losses(dets: Detections, anchors: np.ndarray, gts: np.ndarray, cfg: TrainConfig):
    """Focal, box and direction losses over assigned anchors, normalised by positives."""
    labels, gt_idx = assign_targets(anchors, gts)
    pos = np.flatnonzero(labels == 1)
    norm = max(len(pos), 1)
    n = len(anchors)
    g_logits = np.zeros(n)
    g_boxes = np.zeros((n, 7))
    g_dir = np.zeros((n, 2))
    care = labels >= 0
    fv, fg = focal_loss(dets.logits[care], labels[care])
    cls = float(np.sum(fv)) / norm
    g_logits[care] = fg / norm
    box = dirl = 0.0
    if len(pos):
        tgt = gts[gt_idx[pos]]
        if cfg.box_loss == "odiou":
            it, ct, ot, gb = odiou_loss_batch(dets.boxes[pos], tgt, cfg.weights.gamma)
            bv = it + ct + ot
        else:
            bv, gb = smooth_l1_box_loss(dets.boxes[pos], tgt, anchors[pos])
        box = float(np.sum(bv)) / norm
        g_boxes[pos] = gb / norm
        dv, dg = direction_loss(dets.dir_logits[pos], direction_target(tgt[:, 6]))
        dirl = float(np.sum(dv)) / norm
        g_dir[pos] = dg / norm
    return cls, box, dirl, g_boxes, g_logits, g_dir


def _features(model: ToyDetector, points: np.ndarray) -> np.ndarray:
    return cell_features(voxelize(points, model.spec.grid), model.spec)


def _student_view(scene: Scene, cfg: TrainConfig, rng: np.random.Generator) -> tuple[Scene, Transform]:
    t = draw_transform(cfg.aug, rng) if cfg.global_aug else Transform.identity()
    ops = draw_shape_aware_ops(scene, cfg.aug, rng) if cfg.shape_aware else []
    if cfg.global_aug or ops:
        # shape-aware ops act in the object frames, so order relative to the global map is immaterial
        view = apply_record(scene, AugRecord(t if cfg.global_aug else None, ops), cfg.aug.sparsify_keep_ratio)
    else:
        view = scene
    return view, t


def run_training(
    scenes: list[Scene],
    cfg: TrainConfig,
    init: ToyDetector,
    teacher_init: ToyDetector | None = None,
    use_teacher: bool = True,
    on_epoch: Callable[[int, ToyDetector, ToyDetector | None], None] | None = None,
) -> TrainResult:
    if not scenes:
        raise ValueError("training needs at least one scene")
    rng = np.random.default_rng(cfg.seed)
    student = ToyDetector(init.spec, init.params.copy())
    ema = None
    if use_teacher:
        t0 = teacher_init if teacher_init is not None else init
        ema = EmaState(t0.params.copy(), cfg.ema_decay)
    anchors = student.anchors
    adam = AdamState.zeros(student.params.values.size)
    total_steps = cfg.epochs * len(scenes)
    raw_cache: dict[int, np.ndarray] = {}
    result = TrainResult(student, None)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(scenes))
        sup_sum = 0.0
        for k in order:
            scene = scenes[int(k)]
            frac_epoch = step / len(scenes)
            mu = cfg.mu_override if cfg.mu_override is not None else mu_ramp(frac_epoch, cfg.ramp_epochs)
            if not (use_teacher and cfg.consistency):
                mu = 0.0
            lr = cosine_lr(step, total_steps, cfg.lr, cfg.lr_min)
            view, t = _student_view(scene, cfg, rng)
            if view is scene:
                if int(k) not in raw_cache:
                    raw_cache[int(k)] = _features(student, scene.points)
                x = raw_cache[int(k)]
            else:
                x = _features(student, view.points)
            dets, cache = forward_features(student, x)
            gts = view.boxes
            cls, box, dirl, g_boxes, g_logits, g_dir = supervised_losses(dets, anchors, gts, cfg)
            cons_cls = cons_box = 0.0
            if ema is not None and cfg.consistency:
                if int(k) not in raw_cache:
                    raw_cache[int(k)] = _features(student, scene.points)
                teacher = ToyDetector(student.spec, ema.teacher)
                tdets, _ = forward_features(teacher, raw_cache[int(k)])
                tdets = Detections(apply_transform_boxes(t, tdets.boxes), tdets.logits, tdets.dir_logits)
                if cfg.teacher_nms:
                    keep = np.sort(rotated_nms(tdets, cfg.match.nms_thresh))
                    tdets = tdets.subset(keep)
                ms = match(dets, tdets, cfg.match, gts=gts)
                cons_box, gcb = consistency_box_loss(ms, dets, tdets)
                cons_cls, gcc = consistency_cls_loss(ms, dets, tdets)
                if mu > 0:
                    g_boxes = g_boxes * cfg.weights.omega1 + mu * gcb
                    g_logits = g_logits + mu * gcc
                else:
                    g_boxes = g_boxes * cfg.weights.omega1
            else:
                g_boxes = g_boxes * cfg.weights.omega1
            g_dir = g_dir * cfg.weights.omega2
            grad = detector_backward(student, cache, g_boxes, g_logits, g_dir)
            student.params = adam_step(student.params, grad.values, adam, lr)
            if ema is not None:
                ema = ema_update(ema, student.params)
            parts = LossParts(cls, box, dirl, cons_cls, cons_box)
            sup_sum += student_total_loss(parts, replace(cfg.weights, mu_t=0.0))
            result.metrics.append({
                "step": step, "loss_cls": cls, "loss_box": box, "loss_dir": dirl,
                "loss_cons_cls": cons_cls, "loss_cons_box": cons_box, "mu_t": mu, "lr": lr,
            })
            step += 1
        result.epoch_losses.append(sup_sum / len(scenes))
        if on_epoch is not None:
            on_epoch(epoch, student, None if ema is None else ToyDetector(student.spec, ema.teacher))
    result.teacher = None if ema is None else ToyDetector(student.spec, ema.teacher.copy())
    return result


def pretrain(student: ToyDetector, scenes: list[Scene], epochs: int, cfg: TrainConfig = TrainConfig(), **kw) -> TrainResult:
    """Supervised-only training: no teacher, consistency weight pinned at zero."""
    return run_training(scenes, replace(cfg, epochs=epochs, consistency=False), student, use_teacher=False, **kw)


def train_se_ssd(scenes: list[Scene], cfg: TrainConfig, pretrained: ToyDetector, **kw) -> TrainResult:
    """Self-ensembling: student and teacher both start from ``pretrained``."""
    return run_training(scenes, cfg, pretrained, teacher_init=pretrained, use_teacher=True, **kw)


def write_metrics_csv(path, metrics: list[dict]) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for row in metrics:
            w.writerow({k: (repr(float(v)) if k != "step" else int(v)) for k, v in row.items()})


def predict(model: ToyDetector, scene: Scene, score_thresh: float = 0.1, nms_thresh: float = 0.1) -> Detections:
    dets, _ = forward_features(model, _features(model, scene.points))
    return postprocess(dets, score_thresh, nms_thresh)
