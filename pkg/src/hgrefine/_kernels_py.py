"""Numpy/scipy implementations of the compiled kernels.

Signatures mirror ``_kernels.pyx`` exactly. Used when the extension is not
built or when ``HGREFINE_PURE=1`` is set.
"""
import numpy as np
import scipy.sparse as sp


def _segment_ids(indptr):
    return np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))


def segment_softmax(logits, indptr):
    out = np.empty_like(logits)
    if logits.size == 0:
        return out
    seg = _segment_ids(indptr)
    nonempty = np.diff(indptr) > 0
    starts = indptr[:-1][nonempty]
    mx = np.full(len(indptr) - 1, -np.inf)
    mx[nonempty] = np.maximum.reduceat(logits, starts)
    ex = np.exp(logits - mx[seg])
    tot = np.zeros(len(indptr) - 1)
    tot[nonempty] = np.add.reduceat(ex, starts)
    out[:] = ex / tot[seg]
    return out


def segment_softmax_backward(weights, grad, indptr):
    seg = _segment_ids(indptr)
    dot = np.bincount(seg, weights=weights * grad, minlength=len(indptr) - 1)
    return weights * (grad - dot[seg])


def _csr(weights, src, indptr, ncols):
    return sp.csr_matrix((weights, src, indptr), shape=(len(indptr) - 1, ncols))


def segment_spmm(weights, x, src, indptr):
    return np.asarray(_csr(weights, src, indptr, x.shape[0]) @ x)


def segment_spmm_backward(grad, weights, x, src, indptr, need_w, need_x):
    dw = np.zeros(weights.shape[0])
    dx = np.zeros_like(x)
    if need_w:
        seg = _segment_ids(indptr)
        dw = np.einsum("ij,ij->i", grad[seg], x[src])
    if need_x:
        dx = np.asarray(_csr(weights, src, indptr, x.shape[0]).T @ grad)
    return dw, dx


def edge_dot(a, b, ia, ib):
    return np.einsum("ij,ij->i", a[ia], b[ib])


def scatter_add_rows(grad, idx, n):
    m = sp.csr_matrix(
        (np.ones(len(idx)), (idx, np.arange(len(idx)))), shape=(n, len(idx))
    )
    return np.asarray(m @ grad)


def edge_dot_backward(grad, a, b, ia, ib):
    da = scatter_add_rows(grad[:, None] * b[ib], ia, a.shape[0])
    db = scatter_add_rows(grad[:, None] * a[ia], ib, b.shape[0])
    return da, db


def count_paths(indptr1, indices1, indptr2, indices2, n_out):
    n = len(indptr1) - 1
    n_mid = len(indptr2) - 1
    a1 = sp.csr_matrix(
        (np.ones(len(indices1), dtype=np.int64), indices1, indptr1), shape=(n, n_mid)
    )
    a2 = sp.csr_matrix(
        (np.ones(len(indices2), dtype=np.int64), indices2, indptr2), shape=(n_mid, n_out)
    )
    prod = (a1 @ a2).tolil()
    if n == n_out:
        prod.setdiag(0)
    prod = prod.tocsr()
    prod.eliminate_zeros()
    prod.sort_indices()
    return (
        prod.indptr.astype(np.int64),
        prod.indices.astype(np.int64),
        prod.data.astype(np.int64),
    )
