# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops for segment attention and meta-path counting.

Every function here has a numpy twin in ``_kernels_py`` with the same
signature; ``hgrefine.kernels`` picks one at import time.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp

cnp.import_array()


def segment_softmax(const double[::1] logits, const long long[::1] indptr):
    cdef Py_ssize_t nseg = indptr.shape[0] - 1
    cdef Py_ssize_t s, e, lo, hi
    cdef double mx, tot
    out_arr = np.empty(logits.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    for s in range(nseg):
        lo = indptr[s]
        hi = indptr[s + 1]
        if hi <= lo:
            continue
        mx = logits[lo]
        for e in range(lo + 1, hi):
            if logits[e] > mx:
                mx = logits[e]
        tot = 0.0
        for e in range(lo, hi):
            out[e] = exp(logits[e] - mx)
            tot += out[e]
        for e in range(lo, hi):
            out[e] = out[e] / tot
    return out_arr


def segment_softmax_backward(const double[::1] weights, const double[::1] grad,
                             const long long[::1] indptr):
    cdef Py_ssize_t nseg = indptr.shape[0] - 1
    cdef Py_ssize_t s, e, lo, hi
    cdef double dot
    out_arr = np.empty(weights.shape[0], dtype=np.float64)
    cdef double[::1] out = out_arr
    for s in range(nseg):
        lo = indptr[s]
        hi = indptr[s + 1]
        dot = 0.0
        for e in range(lo, hi):
            dot += weights[e] * grad[e]
        for e in range(lo, hi):
            out[e] = weights[e] * (grad[e] - dot)
    return out_arr


def segment_spmm(const double[::1] weights, const double[:, ::1] x,
                 const long long[::1] src, const long long[::1] indptr):
    cdef Py_ssize_t nseg = indptr.shape[0] - 1
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t s, e, k, j
    cdef double w
    out_arr = np.zeros((nseg, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for s in range(nseg):
        for e in range(indptr[s], indptr[s + 1]):
            w = weights[e]
            j = src[e]
            for k in range(d):
                out[s, k] += w * x[j, k]
    return out_arr


def segment_spmm_backward(const double[:, ::1] grad, const double[::1] weights,
                          const double[:, ::1] x, const long long[::1] src,
                          const long long[::1] indptr, bint need_w, bint need_x):
    cdef Py_ssize_t nseg = indptr.shape[0] - 1
    cdef Py_ssize_t d = x.shape[1]
    cdef Py_ssize_t s, e, k, j
    cdef double w, acc
    dw_arr = np.zeros(weights.shape[0], dtype=np.float64)
    dx_arr = np.zeros((x.shape[0], d), dtype=np.float64)
    cdef double[::1] dw = dw_arr
    cdef double[:, ::1] dx = dx_arr
    for s in range(nseg):
        for e in range(indptr[s], indptr[s + 1]):
            j = src[e]
            if need_w:
                acc = 0.0
                for k in range(d):
                    acc += grad[s, k] * x[j, k]
                dw[e] = acc
            if need_x:
                w = weights[e]
                for k in range(d):
                    dx[j, k] += w * grad[s, k]
    return dw_arr, dx_arr


def edge_dot(const double[:, ::1] a, const double[:, ::1] b,
             const long long[::1] ia, const long long[::1] ib):
    cdef Py_ssize_t m = ia.shape[0]
    cdef Py_ssize_t d = a.shape[1]
    cdef Py_ssize_t e, k, p, q
    cdef double acc
    out_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    for e in range(m):
        p = ia[e]
        q = ib[e]
        acc = 0.0
        for k in range(d):
            acc += a[p, k] * b[q, k]
        out[e] = acc
    return out_arr


def edge_dot_backward(const double[::1] grad, const double[:, ::1] a,
                      const double[:, ::1] b, const long long[::1] ia,
                      const long long[::1] ib):
    cdef Py_ssize_t m = ia.shape[0]
    cdef Py_ssize_t d = a.shape[1]
    cdef Py_ssize_t e, k, p, q
    cdef double g
    da_arr = np.zeros((a.shape[0], d), dtype=np.float64)
    db_arr = np.zeros((b.shape[0], d), dtype=np.float64)
    cdef double[:, ::1] da = da_arr
    cdef double[:, ::1] db = db_arr
    for e in range(m):
        p = ia[e]
        q = ib[e]
        g = grad[e]
        for k in range(d):
            da[p, k] += g * b[q, k]
            db[q, k] += g * a[p, k]
    return da_arr, db_arr


def scatter_add_rows(const double[:, ::1] grad, const long long[::1] idx, Py_ssize_t n):
    cdef Py_ssize_t m = idx.shape[0]
    cdef Py_ssize_t d = grad.shape[1]
    cdef Py_ssize_t e, k, r
    out_arr = np.zeros((n, d), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    for e in range(m):
        r = idx[e]
        for k in range(d):
            out[r, k] += grad[e, k]
    return out_arr


def count_paths(const long long[::1] indptr1, const long long[::1] indices1,
                const long long[::1] indptr2, const long long[::1] indices2,
                Py_ssize_t n_out):
    """Two-step path counts with the diagonal removed, as sorted CSR."""
    cdef Py_ssize_t n = indptr1.shape[0] - 1
    cdef Py_ssize_t i, a, b, mid, j, t, ntouched
    acc_arr = np.zeros(n_out, dtype=np.int64)
    touched_arr = np.empty(n_out, dtype=np.int64)
    cdef long long[::1] acc = acc_arr
    cdef long long[::1] touched = touched_arr
    out_indptr_arr = np.zeros(n + 1, dtype=np.int64)
    cdef long long[::1] out_indptr = out_indptr_arr
    cols = []
    vals = []
    for i in range(n):
        ntouched = 0
        for a in range(indptr1[i], indptr1[i + 1]):
            mid = indices1[a]
            for b in range(indptr2[mid], indptr2[mid + 1]):
                j = indices2[b]
                if j == i:
                    continue
                if acc[j] == 0:
                    touched[ntouched] = j
                    ntouched += 1
                acc[j] += 1
        row = np.sort(touched_arr[:ntouched])
        cols.append(row)
        vals.append(acc_arr[row].copy())
        for t in range(ntouched):
            acc[touched[t]] = 0
        out_indptr[i + 1] = out_indptr[i] + ntouched
    if cols:
        indices = np.concatenate(cols)
        counts = np.concatenate(vals)
    else:
        indices = np.zeros(0, dtype=np.int64)
        counts = np.zeros(0, dtype=np.int64)
    return out_indptr_arr, indices, counts
