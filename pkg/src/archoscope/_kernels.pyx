# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: burst synthesis and peak suppression."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, M_PI

cnp.import_array()


def render_spans(float[::1] out, const long long[::1] starts, const long long[::1] lengths,
                 const double[::1] amps, const double[::1] periods, int ramp):
    cdef Py_ssize_t i, j, m = starts.shape[0]
    cdef long long n, s, r, pos
    cdef double a, w, step
    with nogil:
        for i in range(m):
            n = lengths[i]
            s = starts[i]
            a = amps[i]
            step = 2.0 * M_PI / periods[i]
            r = n // 4
            if r > ramp:
                r = ramp
            for j in range(n):
                pos = j if j < n - 1 - j else n - 1 - j
                if pos < r:
                    w = 0.5 * (1.0 - cos(M_PI * (pos + 0.5) / r))
                else:
                    w = 1.0
                out[s + j] += <float>(a * w * sin(step * j))


def peak_nms(x, double threshold, Py_ssize_t min_distance):
    cdef const double[::1] v = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = v.shape[0], i, k, lo, hi, c
    if n < 3:
        return np.empty(0, dtype=np.int64)
    cand_list = []
    for i in range(1, n - 1):
        if v[i] > threshold and v[i] >= v[i - 1] and v[i] > v[i + 1]:
            cand_list.append(i)
    cand = np.asarray(cand_list, dtype=np.int64)
    if min_distance <= 1 or cand.shape[0] < 2:
        return cand
    order = cand[np.argsort(-np.asarray(v)[cand], kind="stable")]
    cdef const long long[::1] ord_v = order
    cdef cnp.uint8_t[::1] blocked = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] keep = np.zeros(n, dtype=np.uint8)
    with nogil:
        for k in range(ord_v.shape[0]):
            c = ord_v[k]
            if blocked[c]:
                continue
            keep[c] = 1
            lo = c - min_distance + 1
            if lo < 0:
                lo = 0
            hi = c + min_distance
            if hi > n:
                hi = n
            for i in range(lo, hi):
                blocked[i] = 1
    return np.flatnonzero(np.asarray(keep)).astype(np.int64)
