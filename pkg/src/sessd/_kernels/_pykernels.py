"""Pure-Python implementations of the hot geometry kernels.

Boxes are rows ``[cx, cy, cz, w, l, h, r]``; ``l`` runs along the heading.
These functions are the reference for the compiled backend and must stay
numerically identical to it (same clipping order, same tolerances).
"""

import math

import numpy as np

COLLINEAR_EPS = 1e-12
AREA_EPS = 1e-12


def bev_corners(cx, cy, w, l, r):
    """Counterclockwise BEV corners of a box as a list of (x, y)."""
    c, s = math.cos(r), math.sin(r)
    hl, hw = 0.5 * l, 0.5 * w
    out = []
    for du, dv in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
        out.append((cx + du * c - dv * s, cy + du * s + dv * c))
    return out


def polygon_area(poly):
    """Signed shoelace area (positive for counterclockwise)."""
    n = len(poly)
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return 0.5 * acc


def clip_convex(subject, clip):
    """Sutherland-Hodgman clip of convex ``subject`` by convex ``clip``.

    Both polygons are counterclockwise lists of (x, y). Points within
    ``COLLINEAR_EPS`` of a clip edge count as inside. Returns the vertex list
    of the intersection (possibly degenerate, possibly empty).
    """
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            return []
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = out
        out = []
        sx, sy = inp[-1]
        s_side = ex * (sy - ay) - ey * (sx - ax)
        for px, py in inp:
            p_side = ex * (py - ay) - ey * (px - ax)
            p_in = p_side >= -COLLINEAR_EPS
            s_in = s_side >= -COLLINEAR_EPS
            if p_in:
                if not s_in:
                    t = s_side / (s_side - p_side)
                    out.append((sx + t * (px - sx), sy + t * (py - sy)))
                out.append((px, py))
            elif s_in:
                t = s_side / (s_side - p_side)
                out.append((sx + t * (px - sx), sy + t * (py - sy)))
            sx, sy, s_side = px, py, p_side
    return out


def _bev_inter(a, b):
    ra = 0.5 * math.hypot(a[3], a[4])
    rb = 0.5 * math.hypot(b[3], b[4])
    if math.hypot(a[0] - b[0], a[1] - b[1]) > ra + rb:
        return 0.0
    pa = bev_corners(a[0], a[1], a[3], a[4], a[6])
    pb = bev_corners(b[0], b[1], b[3], b[4], b[6])
    poly = clip_convex(pa, pb)
    if len(poly) < 3:
        return 0.0
    area = polygon_area(poly)
    return area if area > AREA_EPS else 0.0


def _iou_bev(a, b):
    if a == b:
        return 1.0
    inter = _bev_inter(a, b)
    if inter <= 0.0:
        return 0.0
    union = a[3] * a[4] + b[3] * b[4] - inter
    return min(inter / union, 1.0)


def _iou_3d(a, b):
    if a == b:
        return 1.0
    zlo = max(a[2] - 0.5 * a[5], b[2] - 0.5 * b[5])
    zhi = min(a[2] + 0.5 * a[5], b[2] + 0.5 * b[5])
    if zhi <= zlo:
        return 0.0
    inter_bev = _bev_inter(a, b)
    if inter_bev <= 0.0:
        return 0.0
    inter = inter_bev * (zhi - zlo)
    union = a[3] * a[4] * a[5] + b[3] * b[4] * b[5] - inter
    return min(inter / union, 1.0)


def _rows(boxes):
    return np.ascontiguousarray(boxes, dtype=np.float64).reshape(-1, 7).tolist()


def iou_bev_matrix(a, b):
    ra, rb = _rows(a), _rows(b)
    out = np.zeros((len(ra), len(rb)))
    for i, x in enumerate(ra):
        for j, y in enumerate(rb):
            out[i, j] = _iou_bev(x, y)
    return out


def iou_3d_matrix(a, b):
    ra, rb = _rows(a), _rows(b)
    out = np.zeros((len(ra), len(rb)))
    for i, x in enumerate(ra):
        for j, y in enumerate(rb):
            out[i, j] = _iou_3d(x, y)
    return out


def iou_bev_pairs(a, b):
    ra, rb = _rows(a), _rows(b)
    if len(ra) != len(rb):
        raise ValueError("pairwise IoU needs equally many boxes on both sides")
    return np.array([_iou_bev(x, y) for x, y in zip(ra, rb)], dtype=np.float64)


def iou_3d_pairs(a, b):
    ra, rb = _rows(a), _rows(b)
    if len(ra) != len(rb):
        raise ValueError("pairwise IoU needs equally many boxes on both sides")
    return np.array([_iou_3d(x, y) for x, y in zip(ra, rb)], dtype=np.float64)


def farthest_point_sampling(points, k, start):
    pts = np.ascontiguousarray(points, dtype=np.float64)[:, :3].tolist()
    n = len(pts)
    chosen = [start]
    mind = [math.inf] * n
    mind[start] = -1.0  # taken
    last = start
    for _ in range(k - 1):
        lx, ly, lz = pts[last]
        best, best_i = -1.0, -1
        for i in range(n):
            if mind[i] < 0.0:
                continue
            x, y, z = pts[i]
            d = (x - lx) ** 2 + (y - ly) ** 2 + (z - lz) ** 2
            if d < mind[i]:
                mind[i] = d
            # strict '>' keeps the lowest index on ties
            if mind[i] > best:
                best, best_i = mind[i], i
        mind[best_i] = -1.0
        chosen.append(best_i)
        last = best_i
    return np.array(chosen, dtype=np.int64)
