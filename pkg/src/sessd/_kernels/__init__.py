"""Hot geometry kernels with a compiled backend and a pure-Python fallback.

The compiled extension is used when it imports; set ``SESSD_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active one.
"""

import os

from . import _pykernels as python_backend

compiled_backend = None
if os.environ.get("SESSD_PURE_PYTHON") != "1":
    try:
        from . import _ckernels as compiled_backend
    except ImportError:  # extension not built
        compiled_backend = None

_active = compiled_backend if compiled_backend is not None else python_backend
BACKEND = "cython" if compiled_backend is not None else "python"

iou_bev_matrix = _active.iou_bev_matrix
iou_3d_matrix = _active.iou_3d_matrix
iou_bev_pairs = _active.iou_bev_pairs
iou_3d_pairs = _active.iou_3d_pairs
farthest_point_sampling = _active.farthest_point_sampling

__all__ = [
    "BACKEND",
    "compiled_backend",
    "python_backend",
    "iou_bev_matrix",
    "iou_3d_matrix",
    "iou_bev_pairs",
    "iou_3d_pairs",
    "farthest_point_sampling",
]
