# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled greedy herding loop.

Same objective and tie rule as ``_herding_py.herding_order``. A candidate's
partial squared distance is abandoned once it exceeds the running minimum
plus the tie tolerance; such a candidate can never be within tolerance of
the final minimum.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

cdef double TIE_REL = 1e-9
cdef double TIE_ABS = 1e-18


def herding_order(const double[:, ::1] features, const double[::1] mu, Py_ssize_t budget):
    cdef Py_ssize_t n = features.shape[0]
    cdef Py_ssize_t d = features.shape[1]
    cdef Py_ssize_t m = budget if budget < n else n
    cdef Py_ssize_t i, j, k, best
    cdef double denom, dist, diff, best_dist, cutoff

    order = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] out = order
    running = np.zeros(d, dtype=np.float64)
    cdef double[::1] s = running
    taken_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] taken = taken_arr
    dist_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] dists = dist_arr

    with nogil:
        for j in range(m):
            denom = <double>(j + 1)
            best_dist = INFINITY
            cutoff = INFINITY
            for i in range(n):
                if taken[i]:
                    dists[i] = INFINITY
                    continue
                dist = 0.0
                for k in range(d):
                    diff = mu[k] - (s[k] + features[i, k]) / denom
                    dist += diff * diff
                    if dist > cutoff:
                        break
                dists[i] = dist
                if dist < best_dist:
                    best_dist = dist
                    cutoff = best_dist + TIE_REL * best_dist + TIE_ABS
            best = 0
            for i in range(n):
                if dists[i] <= cutoff:
                    best = i
                    break
            taken[best] = 1
            out[j] = best
            for k in range(d):
                s[k] += features[best, k]
    return order
