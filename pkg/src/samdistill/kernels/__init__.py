"""Geometric inner loops with a numba path and a pure-numpy fallback.

The numba path is used when numba imports and ``SAMDISTILL_NUMBA`` is not set
to ``0``.  Both paths share signatures and are checked against each other in
the test suite.
"""

import os

from . import _numpy

BACKEND = "numpy"
_impl = _numpy

if os.environ.get("SAMDISTILL_NUMBA", "1").strip().lower() not in ("0", "false", "no", "off"):
    try:
        from . import _numba

        _impl = _numba
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba is optional
        pass

ray_segment_distances = _impl.ray_segment_distances
raycast_panorama = _impl.raycast_panorama
points_in_polygon = _impl.points_in_polygon
voxel_solid = _impl.voxel_solid
nearest_l1 = _impl.nearest_l1

__all__ = [
    "BACKEND",
    "ray_segment_distances",
    "raycast_panorama",
    "points_in_polygon",
    "voxel_solid",
    "nearest_l1",
]
