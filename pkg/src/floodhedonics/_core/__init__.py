"""Kernel backend selection.

The compiled Cython extension is preferred; the numpy fallback is used when
it is missing. Set FLOODHEDONICS_BACKEND=pure (or =compiled) to force one.
"""

import os
import warnings

_requested = os.environ.get("FLOODHEDONICS_BACKEND", "").strip().lower()

if _requested == "pure":
    from . import pure as kernels
elif _requested in ("", "compiled"):
    try:
        from . import _speedups as kernels
    except ImportError:
        if _requested == "compiled":
            raise
        warnings.warn(
            "compiled kernels unavailable, falling back to the numpy backend",
            RuntimeWarning,
            stacklevel=2,
        )
        from . import pure as kernels
else:
    raise ValueError(
        f"FLOODHEDONICS_BACKEND must be 'compiled' or 'pure', got {_requested!r}"
    )

BACKEND = kernels.BACKEND_NAME

demean_by_factor = kernels.demean_by_factor
group_sums = kernels.group_sums
cluster_scores = kernels.cluster_scores
points_in_rings = kernels.points_in_rings
