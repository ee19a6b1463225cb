# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: group demeaning, cluster scores, point-in-polygon.

Behaviourally identical to the numpy fallback in pure.py; keep the two in
sync. All loops release the GIL so callers can parallelize with threads.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

BACKEND_NAME = "compiled"


def demean_by_factor(double[:, ::1] m, int[::1] codes, double[::1] counts):
    """Subtract group means from every column of ``m`` in place.

    Returns the (k,) array of max |group mean| per column.
    """
    cdef Py_ssize_t n = m.shape[0]
    cdef Py_ssize_t k = m.shape[1]
    cdef Py_ssize_t n_groups = counts.shape[0]
    cdef cnp.ndarray[double, ndim=2] means_arr = np.zeros((n_groups, k))
    cdef double[:, ::1] means = means_arr
    cdef cnp.ndarray[double, ndim=1] out_arr = np.zeros(k)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, g
    cdef double v

    with nogil:
        for i in range(n):
            g = codes[i]
            for j in range(k):
                means[g, j] += m[i, j]
        for g in range(n_groups):
            if counts[g] > 0:
                for j in range(k):
                    means[g, j] /= counts[g]
                    v = means[g, j]
                    if v < 0:
                        v = -v
                    if v > out[j]:
                        out[j] = v
        for i in range(n):
            g = codes[i]
            for j in range(k):
                m[i, j] -= means[g, j]
    return out_arr


def group_sums(double[::1] values, int[::1] codes, Py_ssize_t n_groups):
    """Per-group sums of a 1-d float64 array."""
    cdef cnp.ndarray[double, ndim=1] out_arr = np.zeros(n_groups)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, n = values.shape[0]
    with nogil:
        for i in range(n):
            out[codes[i]] += values[i]
    return out_arr


def cluster_scores(double[:, ::1] x, double[::1] resid, int[::1] codes,
                   Py_ssize_t n_clusters):
    """Per-cluster score vectors s_g = sum_{i in g} x_i * e_i, shape (G, k)."""
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t k = x.shape[1]
    cdef cnp.ndarray[double, ndim=2] out_arr = np.zeros((n_clusters, k))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j, g
    cdef double e
    with nogil:
        for i in range(n):
            g = codes[i]
            e = resid[i]
            for j in range(k):
                out[g, j] += x[i, j] * e
    return out_arr


def points_in_rings(double[:, ::1] pts, double[:, ::1] coords,
                    long[::1] ring_offsets):
    """Even-odd containment of points in a polygon given as a set of rings.

    Points exactly on a ring edge count as inside. Returns a (m,) uint8 mask.
    """
    cdef Py_ssize_t n_pts = pts.shape[0]
    cdef Py_ssize_t n_rings = ring_offsets.shape[0] - 1
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] out_arr = np.zeros(n_pts, dtype=np.uint8)
    cdef cnp.uint8_t[::1] out = out_arr
    cdef Py_ssize_t p, r, s, start, stop
    cdef double px, py, ax, ay, bx, by, cross, x_at_y
    cdef bint inside, edge
    cdef int crossings

    with nogil:
        for p in range(n_pts):
            px = pts[p, 0]
            py = pts[p, 1]
            crossings = 0
            edge = False
            for r in range(n_rings):
                start = ring_offsets[r]
                stop = ring_offsets[r + 1]
                for s in range(start, stop - 1):
                    ax = coords[s, 0]
                    ay = coords[s, 1]
                    bx = coords[s + 1, 0]
                    by = coords[s + 1, 1]
                    cross = (bx - ax) * (py - ay) - (by - ay) * (px - ax)
                    if cross == 0.0:
                        if (px >= (ax if ax < bx else bx)
                                and px <= (ax if ax > bx else bx)
                                and py >= (ay if ay < by else by)
                                and py <= (ay if ay > by else by)):
                            edge = True
                            break
                    if (ay > py) != (by > py):
                        x_at_y = ax + (py - ay) * (bx - ax) / (by - ay)
                        if px < x_at_y:
                            crossings += 1
                if edge:
                    break
            inside = edge or (crossings % 2 == 1)
            out[p] = 1 if inside else 0
    return out_arr
