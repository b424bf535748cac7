"""Supervised, ODIoU and consistency losses with their gradients, plus schedules.

Every loss returns ``(value, gradient)``. Box gradients are ordered like the
box row ``[cx, cy, cz, w, l, h, r]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels
from .detections import Detections, sigmoid
from .geom import Box3D, corners_3d_array

SMOOTH_L1_BETA = 1.0
ODIOU_FD_STEP = 1e-4
_PERP_TOL = 1e-12


class MismatchedIndices(IndexError):
    pass


@dataclass(frozen=True)
class LossWeights:
    omega1: float = 2.0
    omega2: float = 0.2
    gamma: float = 1.25
    mu_t: float = 1.0

    def __post_init__(self):
        for name in ("omega1", "omega2", "gamma", "mu_t"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.mu_t > 1:
            raise ValueError("mu_t must be <= 1")


@dataclass(frozen=True)
class ODIoUBreakdown:
    iou_term: float
    center_term: float
    orient_term: float
    total: float
    grad: np.ndarray


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    per_param_errs: np.ndarray
    step: float


@dataclass(frozen=True)
class LossParts:
    cls: float = 0.0
    box: float = 0.0
    dir: float = 0.0
    cons_cls: float = 0.0
    cons_box: float = 0.0


def smooth_l1(x, beta: float = SMOOTH_L1_BETA):
    """Huber-style Smooth-L1 and its derivative; works on scalars and arrays."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    xa = np.asarray(x, dtype=np.float64)
    ax = np.abs(xa)
    quad = ax < beta
    val = np.where(quad, 0.5 * xa * xa / beta, ax - 0.5 * beta)
    grad = np.where(quad, xa / beta, np.sign(xa))
    if xa.ndim == 0:
        return float(val), float(grad)
    return val, grad


# -- ODIoU -------------------------------------------------------------------

def orient_term(delta_r, gamma: float = 1.25):
    """gamma * (1 - |cos delta_r|); |cos| below the kink tolerance counts as 0."""
    ac = np.abs(np.cos(delta_r))
    ac = np.where(ac <= _PERP_TOL, 0.0, ac)
    v = gamma * (1.0 - ac)
    return float(v) if np.ndim(v) == 0 else v


def orient_term_grad(delta_r, gamma: float = 1.25):
    """d/d(delta_r) of gamma * (1 - |cos delta_r|); 0 at the kinks delta_r = +-pi/2."""
    d = np.asarray(delta_r, dtype=np.float64)
    c = np.cos(d)
    sgn = np.where(np.abs(c) <= _PERP_TOL, 0.0, np.sign(c))
    g = gamma * sgn * np.sin(d)
    return float(g) if g.ndim == 0 else g


def _corner_jacobian(boxes: np.ndarray) -> np.ndarray:
    """d corner / d box params, shape (N, 8, 3, 7), matching corners_3d_array order."""
    n = len(boxes)
    c, s = np.cos(boxes[:, 6]), np.sin(boxes[:, 6])
    su = np.array([1, -1, -1, 1, 1, -1, -1, 1], dtype=np.float64)
    sv = np.array([1, 1, -1, -1, 1, 1, -1, -1], dtype=np.float64)
    sz = np.array([-1, -1, -1, -1, 1, 1, 1, 1], dtype=np.float64)
    u = su[None, :] * 0.5 * boxes[:, 4:5]
    v = sv[None, :] * 0.5 * boxes[:, 3:4]
    J = np.zeros((n, 8, 3, 7))
    J[:, :, 0, 0] = 1.0
    J[:, :, 1, 1] = 1.0
    J[:, :, 2, 2] = 1.0
    J[:, :, 0, 3] = -0.5 * sv[None, :] * s[:, None]
    J[:, :, 1, 3] = 0.5 * sv[None, :] * c[:, None]
    J[:, :, 0, 4] = 0.5 * su[None, :] * c[:, None]
    J[:, :, 1, 4] = 0.5 * su[None, :] * s[:, None]
    J[:, :, 2, 5] = 0.5 * sz[None, :]
    J[:, :, 0, 6] = -u * s[:, None] - v * c[:, None]
    J[:, :, 1, 6] = u * c[:, None] - v * s[:, None]
    return J


def center_term_batch(pred: np.ndarray, gt: np.ndarray):
    """c^2 / d^2 per pair and its analytic gradient w.r.t. the predicted box."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 7)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    n = len(pred)
    diff = pred[:, :3] - gt[:, :3]
    c2 = np.einsum("ij,ij->i", diff, diff)
    allc = np.concatenate([corners_3d_array(pred), corners_3d_array(gt)], axis=1)  # (N, 16, 3)
    imax = allc.argmax(axis=1)
    imin = allc.argmin(axis=1)
    rows = np.arange(n)[:, None]
    axes = np.arange(3)[None, :]
    ext = allc[rows, imax, axes] - allc[rows, imin, axes]
    d2 = np.einsum("ij,ij->i", ext, ext)
    J = _corner_jacobian(pred)
    gd2 = np.zeros((n, 7))
    for k in range(3):
        hi, lo = imax[:, k], imin[:, k]
        hi_p, lo_p = hi < 8, lo < 8
        if hi_p.any():
            gd2[hi_p] += 2 * ext[hi_p, k:k + 1] * J[hi_p, hi[hi_p], k, :]
        if lo_p.any():
            gd2[lo_p] -= 2 * ext[lo_p, k:k + 1] * J[lo_p, lo[lo_p], k, :]
    gc2 = np.zeros((n, 7))
    gc2[:, :3] = 2 * diff
    val = c2 / d2
    grad = (gc2 * d2[:, None] - c2[:, None] * gd2) / (d2 * d2)[:, None]
    return val, grad


def iou_term_batch(pred: np.ndarray, gt: np.ndarray, step: float = ODIOU_FD_STEP):
    """1 - IoU3D per pair, gradient by central differences (one kernel call)."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 7)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    n = len(pred)
    val = 1.0 - _kernels.iou_3d_pairs(pred, gt)
    if n == 0:
        return val, np.zeros((0, 7))
    eye = np.eye(7) * step
    plus = (pred[:, None, :] + eye[None]).reshape(-1, 7)
    minus = (pred[:, None, :] - eye[None]).reshape(-1, 7)
    # keep perturbed sizes positive for degenerate callers
    plus[:, 3:6] = np.maximum(plus[:, 3:6], 1e-9)
    minus[:, 3:6] = np.maximum(minus[:, 3:6], 1e-9)
    gtr = np.repeat(gt, 7, axis=0)
    both = _kernels.iou_3d_pairs(np.vstack([plus, minus]), np.vstack([gtr, gtr]))
    ip, im = both[: 7 * n], both[7 * n:]
    grad = -(ip - im).reshape(n, 7) / (2 * step)
    return val, grad


def odiou_loss_batch(pred: np.ndarray, gt: np.ndarray, gamma: float = 1.25, fd_step: float = ODIOU_FD_STEP):
    """Vectorised ODIoU: returns (iou_term, center_term, orient_term, grad (N, 7))."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 7)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    it, gi = iou_term_batch(pred, gt, fd_step)
    ct, gc = center_term_batch(pred, gt)
    dr = pred[:, 6] - gt[:, 6]
    ot = orient_term(dr, gamma)
    grad = gi + gc
    grad[:, 6] += orient_term_grad(dr, gamma)
    return it, ct, ot, grad


def odiou_loss(pred: Box3D, gt: Box3D, gamma: float = 1.25) -> ODIoUBreakdown:
    it, ct, ot, grad = odiou_loss_batch(pred.to_array(), gt.to_array(), gamma)
    it, ct, ot = float(it[0]), float(ct[0]), float(ot[0])
    return ODIoUBreakdown(it, ct, ot, it + ct + ot, grad[0])


def smooth_l1_box_loss(pred: np.ndarray, gt: np.ndarray, anchors: np.ndarray, beta: float = SMOOTH_L1_BETA):
    """Smooth-L1 on anchor-encoded residuals, differentiated w.r.t. the decoded prediction.

    Residuals: centers over the anchor BEV diagonal (z over anchor height), log
    size ratios, and sin of the yaw difference.
    """
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 7)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 7)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 7)
    diag = np.hypot(anchors[:, 3], anchors[:, 4])
    scale = np.column_stack([diag, diag, anchors[:, 5]])
    res = np.zeros_like(pred)
    dres = np.zeros_like(pred)
    res[:, :3] = (pred[:, :3] - gt[:, :3]) / scale
    dres[:, :3] = 1.0 / scale
    res[:, 3:6] = np.log(pred[:, 3:6] / gt[:, 3:6])
    dres[:, 3:6] = 1.0 / pred[:, 3:6]
    dr = pred[:, 6] - gt[:, 6]
    res[:, 6] = np.sin(dr)
    dres[:, 6] = np.cos(dr)
    v, g = smooth_l1(res, beta)
    return v.sum(axis=1), g * dres


# -- supervised classification -------------------------------------------------

def _log_sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    return np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))


def focal_loss(logit, target, alpha: float = 0.25, gamma_f: float = 2.0):
    """Binary focal loss on sigmoid(logit); returns (value, d value / d logit)."""
    z = np.asarray(logit, dtype=np.float64)
    y = np.asarray(target, dtype=np.float64)
    p = sigmoid(z)
    logp, log1mp = _log_sigmoid(z), _log_sigmoid(-z)
    pos = -alpha * (1 - p) ** gamma_f * logp
    neg = -(1 - alpha) * p ** gamma_f * log1mp
    val = np.where(y > 0.5, pos, neg)
    gpos = alpha * (1 - p) ** gamma_f * (gamma_f * p * logp - (1 - p))
    gneg = -(1 - alpha) * p ** gamma_f * (gamma_f * (1 - p) * log1mp - p)
    grad = np.where(y > 0.5, gpos, gneg)
    if z.ndim == 0 and y.ndim == 0:
        return float(val), float(grad)
    return val, grad


def direction_target(yaw) -> np.ndarray:
    """Class 1 iff the ground-truth yaw is positive."""
    return (np.asarray(yaw) > 0).astype(np.int64)


def direction_loss(logits, target_dir):
    """Softmax cross-entropy over two direction bins."""
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z = z.reshape(-1, 2)
    t = np.asarray(target_dir, dtype=np.int64).reshape(-1)
    m = z.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=1))
    val = lse - z[np.arange(len(z)), t]
    soft = np.exp(z - lse[:, None])
    grad = soft
    grad[np.arange(len(z)), t] -= 1.0
    if single:
        return float(val[0]), grad[0]
    return val, grad


# -- consistency ---------------------------------------------------------------

def _check_pairs(matches, student: Detections, teacher: Detections):
    for si, ti, _ in matches.pairs:
        if not (0 <= si < len(student)) or not (0 <= ti < len(teacher)):
            raise MismatchedIndices(
                f"pair ({si}, {ti}) outside {len(student)} student / {len(teacher)} teacher detections"
            )


def consistency_box_loss(matches, student: Detections, teacher: Detections, beta: float = SMOOTH_L1_BETA):
    """Mean over matched pairs of the averaged Smooth-L1 box residual; grads per student box."""
    _check_pairs(matches, student, teacher)
    grads = np.zeros_like(student.boxes)
    n_final = len(matches.pairs)
    if n_final == 0:
        return 0.0, grads
    si = np.array([p[0] for p in matches.pairs], dtype=np.int64)
    ti = np.array([p[1] for p in matches.pairs], dtype=np.int64)
    diff = student.boxes[si] - teacher.boxes[ti]
    res = diff.copy()
    res[:, 6] = np.sin(diff[:, 6])
    v, g = smooth_l1(res, beta)
    g[:, 6] *= np.cos(diff[:, 6])
    value = float(v.sum()) / (7.0 * n_final)
    np.add.at(grads, si, g / (7.0 * n_final))
    return value, grads


def consistency_cls_loss(matches, student: Detections, teacher: Detections, beta: float = SMOOTH_L1_BETA):
    """Mean Smooth-L1 of the sigmoid-score gap over matched pairs; grads per student logit."""
    _check_pairs(matches, student, teacher)
    grads = np.zeros_like(student.logits)
    n_final = len(matches.pairs)
    if n_final == 0:
        return 0.0, grads
    si = np.array([p[0] for p in matches.pairs], dtype=np.int64)
    ti = np.array([p[1] for p in matches.pairs], dtype=np.int64)
    ps, pt = sigmoid(student.logits[si]), sigmoid(teacher.logits[ti])
    v, g = smooth_l1(ps - pt, beta)
    value = float(np.sum(v)) / n_final
    np.add.at(grads, si, g * ps * (1 - ps) / n_final)
    return value, grads


def consistency_total(box_loss: float, cls_loss: float) -> float:
    return cls_loss + box_loss


def student_total_loss(parts: LossParts, weights: LossWeights) -> float:
    return (
        parts.cls
        + weights.omega1 * parts.box
        + weights.omega2 * parts.dir
        + weights.mu_t * (parts.cons_cls + parts.cons_box)
    )


# -- schedules -----------------------------------------------------------------

def mu_ramp(epoch: float, ramp_epochs: float = 15) -> float:
    """Consistency weight exp(-5 (1 - x)^2) with x = min(epoch / ramp_epochs, 1)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    x = min(epoch / ramp_epochs, 1.0) if ramp_epochs > 0 else 1.0
    return math.exp(-5.0 * (1.0 - x) ** 2)


def cosine_lr(step: int, total_steps: int, lr_max: float, lr_min: float = 0.0) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return lr_max
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


# -- checking ------------------------------------------------------------------

def grad_check(loss_fn: Callable, point, step: float = 1e-4) -> GradCheckReport:
    """Compare ``loss_fn(point) -> (value, grad)`` against central differences."""
    x0 = np.array(point, dtype=np.float64).reshape(-1)
    _, analytic = loss_fn(x0.copy())
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    numeric = np.zeros_like(x0)
    for i in range(len(x0)):
        xp, xm = x0.copy(), x0.copy()
        xp[i] += step
        xm[i] -= step
        numeric[i] = (float(loss_fn(xp)[0]) - float(loss_fn(xm)[0])) / (2 * step)
    denom = np.maximum.reduce([np.abs(analytic), np.abs(numeric), np.full_like(x0, 1e-8)])
    errs = np.abs(analytic - numeric) / denom
    return GradCheckReport(float(errs.max()) if len(errs) else 0.0, errs, step)
