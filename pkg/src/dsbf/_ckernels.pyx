# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled clustering kernels. Contract mirrors ``_pykernels``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()


def cosine_assign(features, centroids):
    cdef double[:, ::1] f = np.ascontiguousarray(features, dtype=np.float64)
    cdef double[:, ::1] c = np.ascontiguousarray(centroids, dtype=np.float64)
    cdef Py_ssize_t n = f.shape[0], k = c.shape[0], d = f.shape[1]
    if c.shape[1] != d:
        raise ValueError("feature and centroid dimensions differ")
    labels_arr = np.empty(n, dtype=np.int64)
    mins_arr = np.empty(n, dtype=np.float64)
    cdef cnp.int64_t[::1] labels = labels_arr
    cdef double[::1] mins = mins_arr
    cdef double[::1] cn = np.empty(k, dtype=np.float64)
    cdef Py_ssize_t i, r, t
    cdef double acc, fn, dist, best
    cdef cnp.int64_t arg
    cdef long n_degenerate = 0

    for r in range(k):
        acc = 0.0
        for t in range(d):
            acc += c[r, t] * c[r, t]
        cn[r] = sqrt(acc)
        if cn[r] == 0.0:
            n_degenerate += 1

    for i in range(n):
        acc = 0.0
        for t in range(d):
            acc += f[i, t] * f[i, t]
        fn = sqrt(acc)
        if fn == 0.0:
            n_degenerate += 1
        best = 0.0
        arg = -1
        for r in range(k):
            if fn == 0.0 or cn[r] == 0.0:
                dist = 1.0
            else:
                acc = 0.0
                for t in range(d):
                    acc += f[i, t] * c[r, t]
                dist = 1.0 - acc / (fn * cn[r])
            if arg < 0 or dist < best:
                best = dist
                arg = r
        labels[i] = arg
        mins[i] = best
    return labels_arr, mins_arr, int(n_degenerate)


def hard_centroids(features, labels, Py_ssize_t n_classes, previous):
    cdef double[:, ::1] f = np.ascontiguousarray(features, dtype=np.float64)
    cdef cnp.int64_t[::1] lab = np.ascontiguousarray(labels, dtype=np.int64)
    out_arr = np.array(previous, dtype=np.float64, order="C", copy=True)
    sums_arr = np.zeros((n_classes, f.shape[1]), dtype=np.float64)
    counts_arr = np.zeros(n_classes, dtype=np.int64)
    cdef double[:, ::1] out = out_arr
    cdef double[:, ::1] sums = sums_arr
    cdef cnp.int64_t[::1] counts = counts_arr
    cdef Py_ssize_t i, r, t, n = f.shape[0], d = f.shape[1]

    for i in range(n):
        r = lab[i]
        if r < 0 or r >= n_classes:
            raise IndexError("label out of range")
        counts[r] += 1
        for t in range(d):
            sums[r, t] += f[i, t]
    for r in range(n_classes):
        if counts[r] > 0:
            for t in range(d):
                out[r, t] = sums[r, t] / counts[r]
    return out_arr, counts_arr


def soft_centroids(features, probs, fallback):
    cdef double[:, ::1] f = np.ascontiguousarray(features, dtype=np.float64)
    cdef double[:, ::1] p = np.ascontiguousarray(probs, dtype=np.float64)
    cdef double[::1] fb = np.ascontiguousarray(fallback, dtype=np.float64)
    cdef Py_ssize_t n = f.shape[0], d = f.shape[1], k = p.shape[1]
    out_arr = np.zeros((k, d), dtype=np.float64)
    mass_arr = np.zeros(k, dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double[::1] mass = mass_arr
    cdef Py_ssize_t i, r, t
    cdef double w

    for i in range(n):
        for r in range(k):
            w = p[i, r]
            mass[r] += w
            for t in range(d):
                out[r, t] += w * f[i, t]
    for r in range(k):
        if mass[r] >= 1e-12:
            for t in range(d):
                out[r, t] /= mass[r]
        else:
            for t in range(d):
                out[r, t] = fb[t]
    return out_arr, mass_arr
