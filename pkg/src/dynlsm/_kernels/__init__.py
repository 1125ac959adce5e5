"""Hot numerical kernels.

The compiled ``_core`` extension is used when it was built; otherwise the
numpy twins in ``_fallback`` are loaded. Set ``DYNLSM_PURE_PYTHON=1`` to
force the fallback.
"""

import os

from dynlsm._kernels import _fallback as fallback

core = None
if not os.environ.get("DYNLSM_PURE_PYTHON"):
    try:
        from dynlsm._kernels import _core as core
    except ImportError:
        core = None

_impl = core if core is not None else fallback
BACKEND = "cython" if core is not None else "python"

best_split = _impl.best_split
build_tree = _impl.build_tree
forest_votes = _impl.forest_votes
nearest_point = _impl.nearest_point
idw = _impl.idw
segment_distance = _impl.segment_distance
points_in_ring = _impl.points_in_ring

__all__ = [
    "BACKEND",
    "best_split",
    "build_tree",
    "core",
    "fallback",
    "forest_votes",
    "idw",
    "nearest_point",
    "points_in_ring",
    "segment_distance",
]
