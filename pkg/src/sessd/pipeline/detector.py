"""A small differentiable single-stage detector over a coarse BEV anchor grid.

Voxels above the ground band are grouped into connected BEV blobs; each blob
gets a minimum-area rectangle fit and is described to every anchor within one
cell size of the rectangle's center. Per-cell hand features feed a two-layer tanh MLP whose ten
outputs per anchor are seven box residuals, a confidence logit and two
direction logits. Backprop through the MLP and the residual decoding is exact.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ..detections import Detections
from ..geom import iou_bev_matrix, normalize_angles
from ..matching import rotated_nms
from .optim import ParamVector
from .synthetic import GROUND_Z
from .voxel import GridSpec, VoxelGrid

N_OUT = 10
N_FEAT = 15
RECT_ANGLES = 45


class StaleCache(RuntimeError):
    pass


@dataclass(frozen=True)
class ToySpec:
    extent: float = 10.0
    cells: int = 8
    anchor_size: tuple[float, float, float] = (1.6, 3.9, 1.56)  # w, l, h
    anchor_yaw: float = 0.0
    ground_z: float = GROUND_Z
    ground_margin: float = 0.35
    hidden: int = 32
    grid: GridSpec = field(
        default_factory=lambda: GridSpec((-10.0, -10.0, -3.0), (10.0, 10.0, 1.0), (0.1, 0.1, 0.2))
    )

    @property
    def cell_size(self) -> float:
        return 2 * self.extent / self.cells

    def anchors(self) -> np.ndarray:
        c = -self.extent + self.cell_size * (np.arange(self.cells) + 0.5)
        xs, ys = np.meshgrid(c, c, indexing="ij")
        w, l, h = self.anchor_size
        n = xs.size
        return np.column_stack([
            xs.ravel(), ys.ravel(), np.full(n, self.ground_z + 0.5 * h),
            np.full(n, w), np.full(n, l), np.full(n, h), np.full(n, self.anchor_yaw),
        ])


def init_params(spec: ToySpec, rng: np.random.Generator, scale: float = 1.0) -> ParamVector:
    h = spec.hidden
    w1 = rng.normal(0.0, scale / math.sqrt(N_FEAT), size=(N_FEAT, h))
    w2 = rng.normal(0.0, 0.1 * scale / math.sqrt(h), size=(h, N_OUT))
    b2 = np.zeros(N_OUT)
    b2[7] = -2.0  # background prior for the confidence logit
    return ParamVector.from_arrays({"w1": w1, "b1": np.zeros(h), "w2": w2, "b2": b2})


@dataclass
class ToyDetector:
    spec: ToySpec
    params: ParamVector

    @classmethod
    def create(cls, spec: ToySpec = ToySpec(), seed: int = 0) -> "ToyDetector":
        return cls(spec, init_params(spec, np.random.default_rng(seed)))

    @property
    def anchors(self) -> np.ndarray:
        return self.spec.anchors()


# -- box coding ------------------------------------------------------------------

def decode(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    a = np.asarray(anchors, dtype=np.float64)
    d = np.asarray(deltas, dtype=np.float64)
    diag = np.hypot(a[:, 3], a[:, 4])
    out = np.empty_like(d)
    out[:, 0] = a[:, 0] + d[:, 0] * diag
    out[:, 1] = a[:, 1] + d[:, 1] * diag
    out[:, 2] = a[:, 2] + d[:, 2] * a[:, 5]
    out[:, 3:6] = a[:, 3:6] * np.exp(d[:, 3:6])
    out[:, 6] = a[:, 6] + d[:, 6]
    return out


def encode(boxes: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64)
    a = np.asarray(anchors, dtype=np.float64)
    diag = np.hypot(a[:, 3], a[:, 4])
    d = np.empty_like(b)
    d[:, 0] = (b[:, 0] - a[:, 0]) / diag
    d[:, 1] = (b[:, 1] - a[:, 1]) / diag
    d[:, 2] = (b[:, 2] - a[:, 2]) / a[:, 5]
    d[:, 3:6] = np.log(b[:, 3:6] / a[:, 3:6])
    d[:, 6] = b[:, 6] - a[:, 6]
    return d


# -- features -------------------------------------------------------------------

def min_area_rect(xy: np.ndarray):
    """Smallest-area bounding rectangle over a fixed angle sweep.

    Returns (cx, cy, length, width, theta) with theta the long-side heading in
    [-pi/2, pi/2).
    """
    ang = np.arange(RECT_ANGLES) * (0.5 * math.pi / RECT_ANGLES)
    c, s = np.cos(ang), np.sin(ang)
    u = xy[:, :1] * c + xy[:, 1:2] * s
    v = -xy[:, :1] * s + xy[:, 1:2] * c
    eu = u.max(axis=0) - u.min(axis=0)
    ev = v.max(axis=0) - v.min(axis=0)
    k = int(np.argmin(eu * ev))
    mu, mv = 0.5 * (u[:, k].max() + u[:, k].min()), 0.5 * (v[:, k].max() + v[:, k].min())
    cx, cy = mu * c[k] - mv * s[k], mu * s[k] + mv * c[k]
    if eu[k] >= ev[k]:
        length, width, theta = eu[k], ev[k], ang[k]
    else:
        length, width, theta = ev[k], eu[k], ang[k] + 0.5 * math.pi
    if theta >= 0.5 * math.pi:
        theta -= math.pi
    return float(cx), float(cy), max(float(length), 0.1), max(float(width), 0.1), float(theta)


def cell_features(grid: VoxelGrid, spec: ToySpec) -> np.ndarray:
    """Per-anchor feature matrix (cells*cells, N_FEAT)."""
    anchors = spec.anchors()
    n_cells = spec.cells
    feats = np.zeros((n_cells * n_cells, N_FEAT))
    if len(grid) == 0:
        return feats
    above = grid.means[:, 2] > spec.ground_z + spec.ground_margin
    idx, means, counts = grid.indices[above], grid.means[above], grid.counts[above]
    cs = spec.cell_size
    # raw occupancy per anchor cell
    cell_of = np.floor((means[:, :2] + spec.extent) / cs).astype(np.int64)
    ok = np.all((cell_of >= 0) & (cell_of < n_cells), axis=1)
    np.add.at(feats[:, 14], cell_of[ok, 0] * n_cells + cell_of[ok, 1], counts[ok])
    feats[:, 14] = np.log1p(feats[:, 14] / 10.0)
    if len(idx) == 0:
        return feats
    dims = grid.spec.dims
    occ = np.zeros(dims[:2], dtype=bool)
    occ[idx[:, 0], idx[:, 1]] = True
    occ = ndimage.binary_dilation(occ, structure=np.ones((3, 3), bool))
    lab, n_blobs = ndimage.label(occ, structure=np.ones((3, 3), bool))
    blob_of = lab[idx[:, 0], idx[:, 1]]
    aw, al, ah = spec.anchor_size
    diag = math.hypot(aw, al)
    blobs = []
    for b in range(1, n_blobs + 1):
        m = blob_of == b
        if m.any():
            blobs.append((min_area_rect(means[m, :2]), means[m], counts[m]))
    if not blobs:
        return feats
    centers = np.array([[r[0], r[1]] for r, _, _ in blobs])
    d2 = ((anchors[:, None, :2] - centers[None]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    # every anchor within one cell size of a blob's rectangle center describes that blob
    for a in np.flatnonzero(d2[np.arange(len(anchors)), nearest] <= cs * cs):
        (cx, cy, length, width, theta), pts, cnt = blobs[nearest[a]]
        total = float(cnt.sum())
        xa, ya, za = anchors[a, :3]
        zs = pts[:, 2]
        centroid = (cnt @ pts[:, :2]) / total
        feats[a, :14] = [
            1.0,
            math.log1p(total / 10.0),
            (cx - xa) / diag,
            (cy - ya) / diag,
            (float(cnt @ zs) / total - za) / ah,
            (zs.max() - za) / ah,
            (zs.min() - za) / ah,
            math.log(length / al),
            math.log(width / aw),
            theta / (0.5 * math.pi),
            math.cos(2 * theta),
            math.sin(2 * theta),
            (centroid[0] - xa) / diag,
            (centroid[1] - ya) / diag,
        ]
    return feats


# -- forward / backward ------------------------------------------------------------

@dataclass
class ForwardCache:
    x: np.ndarray
    h: np.ndarray
    out: np.ndarray
    boxes: np.ndarray
    params: np.ndarray  # snapshot used to detect stale caches


def forward_features(model: ToyDetector, x: np.ndarray) -> tuple[Detections, ForwardCache]:
    p = model.params.views()
    h = np.tanh(x @ p["w1"] + p["b1"])
    out = h @ p["w2"] + p["b2"]
    boxes = decode(model.anchors, out[:, :7])
    dets = Detections(boxes, out[:, 7].copy(), out[:, 8:10].copy())
    return dets, ForwardCache(x, h, out, boxes, model.params.values.copy())


def detector_forward(model: ToyDetector, grid: VoxelGrid) -> tuple[Detections, ForwardCache]:
    return forward_features(model, cell_features(grid, model.spec))


def detector_backward(
    model: ToyDetector,
    cache: ForwardCache,
    g_boxes: np.ndarray,
    g_logits: np.ndarray,
    g_dir: np.ndarray | None = None,
) -> ParamVector:
    """Parameter gradient given loss gradients w.r.t. decoded boxes and logits."""
    if not np.array_equal(cache.params, model.params.values):
        raise StaleCache("parameters changed since the forward pass")
    a = model.anchors
    n = len(a)
    dout = np.zeros((n, N_OUT))
    gb = np.asarray(g_boxes, dtype=np.float64).reshape(n, 7)
    diag = np.hypot(a[:, 3], a[:, 4])
    dout[:, 0] = gb[:, 0] * diag
    dout[:, 1] = gb[:, 1] * diag
    dout[:, 2] = gb[:, 2] * a[:, 5]
    dout[:, 3:6] = gb[:, 3:6] * cache.boxes[:, 3:6]
    dout[:, 6] = gb[:, 6]
    dout[:, 7] = np.asarray(g_logits, dtype=np.float64).reshape(n)
    if g_dir is not None:
        dout[:, 8:10] = np.asarray(g_dir, dtype=np.float64).reshape(n, 2)
    p = model.params.views()
    dh = dout @ p["w2"].T
    dz = dh * (1.0 - cache.h ** 2)
    grads = {
        "w1": cache.x.T @ dz,
        "b1": dz.sum(axis=0),
        "w2": cache.h.T @ dout,
        "b2": dout.sum(axis=0),
    }
    return ParamVector(np.concatenate([grads[k].ravel() for k, _ in model.params.layout]), model.params.layout)


# -- targets and post-processing ------------------------------------------------------

def assign_targets(anchors: np.ndarray, gts: np.ndarray, pos_iou: float = 0.6, neg_iou: float = 0.45):
    """Label anchors 1 (positive), 0 (negative) or -1 (ignored) and give each its gt index.

    Each ground truth additionally claims its best-overlapping anchor, so every
    object has at least one positive even when no anchor reaches ``pos_iou``.
    """
    n = len(anchors)
    labels = np.zeros(n, dtype=np.int64)
    gt_idx = np.full(n, -1, dtype=np.int64)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 7)
    if len(gts) == 0:
        return labels, gt_idx
    ious = iou_bev_matrix(anchors, gts)
    best = ious.argmax(axis=1)
    best_iou = ious[np.arange(n), best]
    gt_idx[:] = best
    labels[(best_iou > neg_iou) & (best_iou < pos_iou)] = -1
    labels[best_iou >= pos_iou] = 1
    # forced positives: each gt's best anchor, chosen by distance when no anchor overlaps
    d2 = ((anchors[:, None, :2] - gts[None, :, :2]) ** 2).sum(axis=2)
    for g in range(len(gts)):
        col = ious[:, g]
        a = int(col.argmax()) if col.max() > 0 else int(d2[:, g].argmin())
        labels[a] = 1
        gt_idx[a] = g
    gt_idx[labels == 0] = -1
    return labels, gt_idx


def apply_direction(dets: Detections) -> np.ndarray:
    """Flip yaw by pi where the direction head disagrees with its sign."""
    r = dets.boxes[:, 6]
    if dets.dir_logits is None:
        return dets.boxes.copy()
    want_pos = dets.dir_logits[:, 1] > dets.dir_logits[:, 0]
    flip = want_pos != (normalize_angles(r) > 0)
    boxes = dets.boxes.copy()
    boxes[:, 6] = normalize_angles(r + np.where(flip, math.pi, 0.0))
    return boxes


def postprocess(dets: Detections, score_thresh: float = 0.1, nms_thresh: float = 0.1) -> Detections:
    keep = np.flatnonzero(dets.scores >= score_thresh)
    if len(keep) == 0:
        return Detections.empty()
    sub = dets.subset(keep)
    sub = Detections(apply_direction(sub), sub.logits, sub.dir_logits)
    kept = rotated_nms(sub, nms_thresh)
    return sub.subset(kept)
