"""Pure-numpy implementations of the hot kernels.

Mirrors the compiled extension in `_speedups.pyx`; the two must stay
behaviourally identical (tested in tests/test_kernels.py). This module is the
import-time fallback when the extension is unavailable.
"""

import numpy as np

BACKEND_NAME = "pure"


def demean_by_factor(m, codes, counts):
    """Subtract group means from every column of ``m`` in place.

    m       : (n, k) float64, modified in place
    codes   : (n,) int32 dense group codes in [0, G)
    counts  : (G,) float64 group sizes (zero-count groups allowed)

    Returns the (k,) array of max |group mean| per column, the quantity the
    alternating-projection loop uses to decide convergence.
    """
    n_groups = counts.shape[0]
    k = m.shape[1]
    means = np.zeros((n_groups, k))
    for j in range(k):
        means[:, j] = np.bincount(codes, weights=m[:, j], minlength=n_groups)
    nonzero = counts > 0
    means[nonzero] /= counts[nonzero, None]
    np.subtract(m, means[codes], out=m)
    return np.abs(means).max(axis=0) if n_groups else np.zeros(k)


def group_sums(values, codes, n_groups):
    """Per-group sums of a 1-d float64 array."""
    return np.bincount(codes, weights=values, minlength=n_groups)


def cluster_scores(x, resid, codes, n_clusters):
    """Per-cluster score vectors s_g = sum_{i in g} x_i * e_i, shape (G, k)."""
    k = x.shape[1]
    scores = np.empty((n_clusters, k))
    weighted = x * resid[:, None]
    for j in range(k):
        scores[:, j] = np.bincount(codes, weights=weighted[:, j], minlength=n_clusters)
    return scores


def points_in_rings(pts, coords, ring_offsets):
    """Even-odd containment of points in a polygon given as a set of rings.

    pts          : (m, 2) float64 lon-lat points
    coords       : (V, 2) float64 ring vertices, rings concatenated, each ring
                   closed (first vertex repeated last)
    ring_offsets : (R+1,) int64 start index of each ring in ``coords``

    Points exactly on a ring edge count as inside. Returns a (m,) uint8 mask.
    """
    px = pts[:, 0:1]
    py = pts[:, 1:2]
    inside = np.zeros(pts.shape[0], dtype=bool)
    on_edge = np.zeros(pts.shape[0], dtype=bool)
    for r in range(ring_offsets.shape[0] - 1):
        ring = coords[ring_offsets[r] : ring_offsets[r + 1]]
        ax, ay = ring[:-1, 0], ring[:-1, 1]
        bx, by = ring[1:, 0], ring[1:, 1]
        cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
        on_seg = (
            (cross == 0.0)
            & (px >= np.minimum(ax, bx))
            & (px <= np.maximum(ax, bx))
            & (py >= np.minimum(ay, by))
            & (py <= np.maximum(ay, by))
        )
        on_edge |= on_seg.any(axis=1)
        straddles = (ay > py) != (by > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_at_y = ax + (py - ay) * (bx - ax) / (by - ay)
        crossings = straddles & (px < x_at_y)
        inside ^= (crossings.sum(axis=1) % 2).astype(bool)
    return (inside | on_edge).astype(np.uint8)
