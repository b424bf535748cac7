"""Time the compiled kernels against the pure-Python fallback.

    python3 benchmarks/bench_kernels.py [--repeat 3]
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from sessd._kernels import _pykernels

try:
    from sessd._kernels import _ckernels
except ImportError:
    _ckernels = None


def random_boxes(rng, n):
    return np.column_stack([
        rng.uniform(-5, 5, (n, 3)),
        rng.uniform(0.5, 4.0, (n, 3)),
        rng.uniform(-np.pi, np.pi, n),
    ])


def best_of(fn, repeat):
    best = float("inf")
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t)
    return best


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    a, b = random_boxes(rng, 200), random_boxes(rng, 200)
    pa, pb = random_boxes(rng, 5000), random_boxes(rng, 5000)
    pts = rng.normal(size=(4000, 3))
    cases = [
        ("iou_bev_matrix 200x200", lambda k: k.iou_bev_matrix(a, b)),
        ("iou_3d_matrix 200x200", lambda k: k.iou_3d_matrix(a, b)),
        ("iou_3d_pairs 5000", lambda k: k.iou_3d_pairs(pa, pb)),
        ("fps 4000 -> 400", lambda k: k.farthest_point_sampling(pts, 400, 0)),
    ]
    print(f"{'kernel':<26}{'python s':>12}{'compiled s':>12}{'speedup':>10}")
    for name, call in cases:
        t_py = best_of(lambda: call(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:<26}{t_py:>12.4f}{'n/a':>12}{'n/a':>10}")
            continue
        t_c = best_of(lambda: call(_ckernels), args.repeat)
        np.testing.assert_allclose(call(_pykernels), call(_ckernels), rtol=0, atol=1e-12)
        print(f"{name:<26}{t_py:>12.4f}{t_c:>12.4f}{t_py / t_c:>9.1f}x")


if __name__ == "__main__":
    main()
