"""Independent reference implementations used as test oracles.

None of these call into the clipping kernels or the production matching and
evaluation code paths.
"""

from __future__ import annotations

import math

import numpy as np


def random_box(rng, center_scale=2.0, size_range=(0.3, 3.0)) -> np.ndarray:
    return np.concatenate([
        rng.uniform(-center_scale, center_scale, 3),
        rng.uniform(*size_range, 3),
        [rng.uniform(-math.pi, math.pi)],
    ])


def _inside(xy: np.ndarray, box: np.ndarray) -> np.ndarray:
    c, s = math.cos(box[6]), math.sin(box[6])
    dx, dy = xy[:, 0] - box[0], xy[:, 1] - box[1]
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (np.abs(u) <= 0.5 * box[4]) & (np.abs(v) <= 0.5 * box[3])


def _bev_aabb(box: np.ndarray):
    c, s = abs(math.cos(box[6])), abs(math.sin(box[6]))
    hx = 0.5 * (box[4] * c + box[3] * s)
    hy = 0.5 * (box[4] * s + box[3] * c)
    return box[0] - hx, box[0] + hx, box[1] - hy, box[1] + hy


def mc_iou_bev(a: np.ndarray, b: np.ndarray, n: int, rng) -> float:
    """Monte-Carlo BEV IoU from uniform samples over the joint bounding rectangle."""
    ax0, ax1, ay0, ay1 = _bev_aabb(a)
    bx0, bx1, by0, by1 = _bev_aabb(b)
    x0, x1, y0, y1 = min(ax0, bx0), max(ax1, bx1), min(ay0, by0), max(ay1, by1)
    xy = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
    ia, ib = _inside(xy, a), _inside(xy, b)
    union = np.count_nonzero(ia | ib)
    return np.count_nonzero(ia & ib) / union if union else 0.0


def mc_area(box: np.ndarray, others: list[np.ndarray], n: int, rng) -> float:
    x0, x1, y0, y1 = _bev_aabb(box)
    xy = np.column_stack([rng.uniform(x0, x1, n), rng.uniform(y0, y1, n)])
    m = _inside(xy, box)
    for o in others:
        m &= _inside(xy, o)
    return (x1 - x0) * (y1 - y0) * np.count_nonzero(m) / n


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def brute_force_match(s_boxes, s_logits, t_boxes, t_logits, tau_c, tau_i, iou_fn):
    """Literal reading: filter both sets, all-pairs IoU, per-student best above tau_i."""
    s_ok = [i for i in range(len(s_logits)) if sigmoid(s_logits[i]) >= tau_c]
    t_ok = [j for j in range(len(t_logits)) if sigmoid(t_logits[j]) >= tau_c]
    pairs = []
    for i in s_ok:
        best_j, best_v = None, -1.0
        for j in t_ok:  # ascending index, strict '>' keeps the lowest index on ties
            v = iou_fn(s_boxes[i], t_boxes[j])
            if v > tau_i and v > best_v:
                best_j, best_v = j, v
        if best_j is not None:
            pairs.append((i, best_j, best_v))
    return pairs, len(s_ok)


def brute_force_ap(scenes, iou_fn, thr: float, recall_points: int) -> float:
    """AP by re-running greedy matching from scratch at every distinct score threshold.

    ``scenes`` is a list of (det_boxes, det_scores, gt_boxes, gt_care) tuples.
    """
    n_gt = sum(int(np.sum(s[3])) for s in scenes)
    all_scores = sorted({float(x) for s in scenes for x in s[1]}, reverse=True)
    pts = []
    for t in all_scores:
        tp = fp = 0
        for boxes, scores, gts, care in scenes:
            idx = [i for i in range(len(scores)) if scores[i] >= t]
            idx.sort(key=lambda i: (-scores[i], i))
            used = [False] * len(gts)
            for i in idx:
                best, bv = -1, -1.0
                for g in range(len(gts)):
                    if used[g]:
                        continue
                    v = iou_fn(boxes[i], gts[g])
                    if v > bv:
                        best, bv = g, v
                if best >= 0 and bv >= thr:
                    used[best] = True
                    if care[best]:
                        tp += 1
                else:
                    fp += 1
        if tp + fp:
            pts.append((tp / (tp + fp), tp / n_gt if n_gt else 0.0))
    samples = [i / 40 for i in range(1, 41)] if recall_points == 40 else [i / 10 for i in range(11)]
    total = 0.0
    for r in samples:
        cands = [p for p, rec in pts if rec >= r - 1e-12]
        total += max(cands) if cands else 0.0
    return total / len(samples) if n_gt else 0.0


def _rows(a):
    return {tuple(r) for r in np.asarray(a).tolist()}


def check_augment_invariants(scene, seed: int, keep_ratio: float = 0.5) -> None:
    """Set-membership and count properties of the three operators plus replay, on one scene.

    Raises AssertionError on the first violated property.
    """
    from sessd.augment import (
        AugConfig, AugRecord, apply_record, dropout_pyramid, partition_pyramids,
        shape_aware_augment, sparsify_pyramid, swap_pyramids,
    )
    from sessd.geom import points_in_box

    rng = np.random.default_rng(seed)
    boxes = [lb.box for lb in scene.labels]
    owner = np.full(len(scene.points), -1)
    for i, b in enumerate(boxes):
        owner[points_in_box(scene.points, b, tol=0.0) & (owner < 0)] = i
    objs = [scene.points[owner == i] for i in range(len(boxes))]
    for i, (pts, box) in enumerate(zip(objs, boxes)):
        part = partition_pyramids(pts, box)
        a = part.assignments
        assert len(a) == len(pts) and np.all((a >= 0) & (a < 6))
        assert sum(len(part.members(f)) for f in range(6)) == len(pts)
        face = int(rng.integers(6))
        subset = pts[a == face]
        dropped = dropout_pyramid(pts, part, face)
        assert len(dropped) == len(pts) - len(subset)
        assert np.array_equal(dropped, pts[a != face])  # others untouched, order kept
        assert not (_rows(pts) - _rows(dropped)) - _rows(subset)
        sparse = sparsify_pyramid(pts, part, face, keep_ratio, np.random.default_rng(seed + i))
        want = len(pts) - len(subset) + (math.ceil(keep_ratio * len(subset)) if len(subset) else 0)
        assert len(sparse) == want
        assert _rows(sparse) <= _rows(pts)
        assert _rows(pts[a != face]) <= _rows(sparse)
        if len(boxes) > 1:
            j = (i + 1 + int(rng.integers(len(boxes) - 1))) % len(boxes)
            sub_b = objs[j][partition_pyramids(objs[j], boxes[j]).assignments == face]
            a2, b2 = swap_pyramids(pts, box, objs[j], boxes[j], face)
            assert len(a2) + len(b2) == len(pts) + len(objs[j])
            assert len(a2) == len(pts) - len(subset) + len(sub_b)
            assert points_in_box(a2[len(pts) - len(subset):], box, tol=1e-9).all()
            assert points_in_box(b2[len(objs[j]) - len(sub_b):], boxes[j], tol=1e-9).all()
    cfg = AugConfig(p1=0.5, p2=0.3, p3=0.5, sparsify_keep_ratio=keep_ratio)
    out, rec = shape_aware_augment(scene, cfg, np.random.default_rng(seed))
    again = apply_record(scene, AugRecord.from_text(rec.to_text()), keep_ratio)
    assert np.array_equal(out.points, again.points)
    assert out.labels == again.labels


def detector_grad_error(seed: int, step: float = 1e-5, hidden: int = 32) -> float:
    """Max relative error of toy-detector backprop against central differences.

    The loss is a random linear functional of the decoded boxes, confidence
    logits and direction logits, evaluated on random per-anchor features.
    """
    from sessd.losses import grad_check
    from sessd.pipeline.detector import N_FEAT, ToyDetector, ToySpec, detector_backward, forward_features
    from sessd.pipeline.optim import ParamVector

    rng = np.random.default_rng(seed)
    model = ToyDetector.create(ToySpec(hidden=hidden), seed=seed)
    model.params = ParamVector(model.params.values + rng.normal(0, 0.1, model.params.values.size), model.params.layout)
    n = len(model.anchors)
    x = rng.normal(0, 1, (n, N_FEAT))
    cb, cl, cd = rng.normal(size=(n, 7)), rng.normal(size=n), rng.normal(size=(n, 2))
    layout = model.params.layout

    def fn(theta):
        model.params = ParamVector(theta, layout)
        dets, cache = forward_features(model, x)
        val = float(np.sum(cb * dets.boxes) + cl @ dets.logits + np.sum(cd * dets.dir_logits))
        return val, detector_backward(model, cache, cb, cl, cd).values

    return grad_check(fn, model.params.values.copy(), step=step).max_rel_err
