"""Differentiable primitives.

Only bias-add broadcasts; every other binary op requires equal shapes.
Segments are CSR-style: segment ``s`` owns entries ``indptr[s]:indptr[s+1]``.
"""
import numpy as np

from .. import kernels
from .tensor import Tensor, as_tensor, record


def _check_2d(x, opname):
    if x.data.ndim != 2:
        raise ValueError(f"{opname}: expected a 2-D tensor, got shape {x.shape}")


def const(x, dtype=None):
    return Tensor(x, dtype=dtype)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul: shape mismatch {a.shape} x {b.shape}")
    out = a.data @ b.data

    def bw(g):
        return (
            g @ b.data.T if a.tracked else None,
            a.data.T @ g if b.tracked else None,
        )

    return record(out, (a, b), bw, "matmul")


def add_bias(x, b):
    x, b = as_tensor(x), as_tensor(b)
    if b.shape != (1, x.shape[1]):
        raise ValueError(f"add_bias: bias shape {b.shape} does not fit {x.shape}")

    def bw(g):
        return g, g.sum(axis=0, keepdims=True)

    return record(x.data + b.data, (x, b), bw, "add_bias")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return record(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")

    def bw(g):
        return g * b.data, g * a.data

    return record(a.data * b.data, (a, b), bw, "mul")


def scale(x, c):
    x = as_tensor(x)
    c = float(c)
    return record(x.data * c, (x,), lambda g: (g * c,), "scale")


def scale_by(x, s):
    """Multiply every entry of ``x`` by the 1x1 tensor ``s``."""
    x, s = as_tensor(x), as_tensor(s)
    if s.data.size != 1:
        raise ValueError(f"scale_by: expected a scalar tensor, got {s.shape}")
    sv = s.data.reshape(())

    def bw(g):
        return g * sv, np.sum(g * x.data).reshape(s.shape)

    return record(x.data * sv, (x, s), bw, "scale_by")


def concat_cols(parts):
    parts = [as_tensor(p) for p in parts]
    rows = {p.shape[0] for p in parts}
    if len(rows) != 1:
        raise ValueError(f"concat_cols: row counts differ {[p.shape for p in parts]}")
    widths = [p.shape[1] for p in parts]
    cuts = np.cumsum([0] + widths)

    def bw(g):
        return tuple(g[:, cuts[i] : cuts[i + 1]] for i in range(len(parts)))

    return record(np.concatenate([p.data for p in parts], axis=1), tuple(parts), bw, "concat_cols")


def concat_rows(parts):
    parts = [as_tensor(p) for p in parts]
    cols = {p.shape[1:] for p in parts}
    if len(cols) != 1:
        raise ValueError(f"concat_rows: column shapes differ {[p.shape for p in parts]}")
    cuts = np.cumsum([0] + [p.shape[0] for p in parts])

    def bw(g):
        return tuple(g[cuts[i] : cuts[i + 1]] for i in range(len(parts)))

    return record(np.concatenate([p.data for p in parts], axis=0), tuple(parts), bw, "concat_rows")


def slice_cols(x, start, stop):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[:, start:stop] = g
        return (full,)

    return record(x.data[:, start:stop].copy(), (x,), bw, "slice_cols")


def slice_rows(x, start, stop):
    x = as_tensor(x)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return record(x.data[start:stop].copy(), (x,), bw, "slice_rows")


def gather_rows(x, idx):
    x = as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    n = x.shape[0]

    def bw(g):
        return (kernels.scatter_add_rows(g, idx, n).astype(g.dtype, copy=False),)

    return record(x.data[idx], (x,), bw, "gather_rows")


# -- elementwise ---------------------------------------------------------


def tanh(x):
    x = as_tensor(x)
    y = np.tanh(x.data)
    return record(y, (x,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(x):
    x = as_tensor(x)
    pos = x.data > 0
    return record(np.where(pos, x.data, 0.0).astype(x.dtype), (x,), lambda g: (g * pos,), "relu")


def leaky_relu(x, slope=0.2):
    x = as_tensor(x)
    pos = x.data > 0
    factor = np.where(pos, 1.0, slope).astype(x.dtype)
    return record(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def elu(x, alpha=1.0):
    x = as_tensor(x)
    pos = x.data > 0
    neg_exp = np.exp(np.minimum(x.data, 0.0))
    y = np.where(pos, x.data, alpha * (neg_exp - 1.0)).astype(x.dtype)
    deriv = np.where(pos, 1.0, alpha * neg_exp).astype(x.dtype)
    return record(y, (x,), lambda g: (g * deriv,), "elu")


def _sigmoid(v):
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    return out


def sigmoid(x):
    x = as_tensor(x)
    y = _sigmoid(x.data)
    return record(y, (x,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def dropout(x, rate, rng=None, mask=None, training=True):
    """Inverted dropout. Pass ``mask`` (0/1 array) to fix the pattern."""
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mask is None:
        if rng is None:
            raise ValueError("dropout needs an rng or an explicit mask")
        mask = rng.random(x.shape) >= rate
    factor = (np.asarray(mask, dtype=x.dtype) / (1.0 - rate)).astype(x.dtype)
    return record(x.data * factor, (x,), lambda g: (g * factor,), "dropout")


# -- reductions ----------------------------------------------------------


def sum_all(x):
    x = as_tensor(x)
    shape = x.shape
    total = np.sum(x.data, dtype=np.float64)
    return record(
        np.array([[total]], dtype=x.dtype), (x,), lambda g: (np.full(shape, g.reshape(()), dtype=g.dtype),), "sum_all"
    )


def mean_rows(x, rows=None):
    """Column means over ``rows`` (all rows when None); returns shape (1, d)."""
    x = as_tensor(x)
    _check_2d(x, "mean_rows")
    shape = x.shape
    if rows is None:
        n = shape[0]
        out = x.data.mean(axis=0, keepdims=True, dtype=np.float64).astype(x.dtype)

        def bw(g):
            return (np.broadcast_to(g / n, shape).astype(g.dtype),)

    else:
        rows = np.asarray(rows, dtype=np.int64)
        n = len(rows)
        if n == 0:
            raise ValueError("mean_rows: empty row selection")
        out = x.data[rows].mean(axis=0, keepdims=True, dtype=np.float64).astype(x.dtype)

        def bw(g):
            full = np.zeros(shape, dtype=g.dtype)
            np.add.at(full, rows, g / n)
            return (full,)

    return record(out, (x,), bw, "mean_rows")


def row_softmax(x):
    x = as_tensor(x)
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True, dtype=np.float64)
    y = y.astype(x.dtype)

    def bw(g):
        return (y * (g - np.sum(g * y, axis=1, keepdims=True)),)

    return record(y, (x,), bw, "row_softmax")


# -- segment ops ---------------------------------------------------------


def segment_softmax(logits, indptr):
    """Softmax within each segment of a column of per-entry logits (E, 1)."""
    logits = as_tensor(logits)
    indptr = np.asarray(indptr, dtype=np.int64)
    if logits.data.size != indptr[-1]:
        raise ValueError(f"segment_softmax: {logits.data.size} logits for {indptr[-1]} entries")
    if np.any(np.diff(indptr) <= 0):
        raise ValueError("segment_softmax: empty segment")
    shape, dt = logits.shape, logits.dtype
    w = kernels.segment_softmax(logits.data.reshape(-1), indptr)

    def bw(g):
        return (kernels.segment_softmax_backward(w, g.reshape(-1), indptr).reshape(shape).astype(dt),)

    return record(w.reshape(shape).astype(dt), (logits,), bw, "segment_softmax")


def segment_weighted_sum(weights, x, src, indptr):
    """``out[s] = sum_{e in s} weights[e] * x[src[e]]``; weights shaped (E, 1)."""
    weights, x = as_tensor(weights), as_tensor(x)
    src = np.asarray(src, dtype=np.int64)
    indptr = np.asarray(indptr, dtype=np.int64)
    if weights.data.size != len(src) or indptr[-1] != len(src):
        raise ValueError("segment_weighted_sum: weights, src and indptr disagree")
    wshape, dt = weights.shape, x.dtype
    wv = weights.data.reshape(-1)
    out = kernels.segment_spmm(wv, x.data, src, indptr).astype(dt)

    def bw(g):
        dw, dx = kernels.segment_spmm_backward(g, wv, x.data, src, indptr, weights.tracked, x.tracked)
        return (
            dw.reshape(wshape).astype(dt) if weights.tracked else None,
            dx.astype(dt) if x.tracked else None,
        )

    return record(out, (weights, x), bw, "segment_weighted_sum")


def edge_dot(a, b, ia, ib):
    """Row-pair dot products ``a[ia[e]] . b[ib[e]]``, shape (E, 1)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"edge_dot: width mismatch {a.shape} vs {b.shape}")
    ia = np.asarray(ia, dtype=np.int64)
    ib = np.asarray(ib, dtype=np.int64)
    dt = a.dtype
    out = kernels.edge_dot(a.data, b.data, ia, ib).reshape(-1, 1).astype(dt)

    def bw(g):
        da, db = kernels.edge_dot_backward(g.reshape(-1), a.data, b.data, ia, ib)
        return da.astype(dt), db.astype(dt)

    return record(out, (a, b), bw, "edge_dot")


# -- losses --------------------------------------------------------------


def cross_entropy(logits, targets, rows=None, class_weight=None):
    """Weighted mean negative log-likelihood of ``targets`` under softmax(logits)."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    rows = np.arange(logits.shape[0]) if rows is None else np.asarray(rows, dtype=np.int64)
    if len(rows) == 0:
        raise ValueError("cross_entropy: no rows selected")
    z = logits.data[rows].astype(np.float64)
    y = targets[rows]
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    w = np.ones(len(rows)) if class_weight is None else np.asarray(class_weight, dtype=np.float64)[y]
    wsum = w.sum()
    loss = -np.sum(w * logp[np.arange(len(rows)), y]) / wsum
    shape, dt = logits.shape, logits.dtype

    def bw(g):
        p = np.exp(logp)
        p[np.arange(len(rows)), y] -= 1.0
        full = np.zeros(shape)
        full[rows] = p * (w / wsum)[:, None]
        return ((full * g.reshape(())).astype(dt),)

    return record(np.array([[loss]], dtype=dt), (logits,), bw, "cross_entropy")


def binary_cross_entropy(prob, target, eps=1e-12, weight=None):
    """Mean BCE of probabilities (E, 1) against 0/1 targets, optionally per-sample weighted."""
    prob = as_tensor(prob)
    y = np.asarray(target, dtype=np.float64).reshape(prob.shape)
    w = 1.0 if weight is None else np.asarray(weight, dtype=np.float64).reshape(prob.shape)
    p = np.clip(prob.data.astype(np.float64), eps, 1.0 - eps)
    n = p.size
    loss = -np.sum(w * (y * np.log(p) + (1.0 - y) * np.log(1.0 - p))) / n
    dt = prob.dtype

    def bw(g):
        d = w * (-(y / p) + (1.0 - y) / (1.0 - p)) / n
        return ((d * g.reshape(())).astype(dt),)

    return record(np.array([[loss]], dtype=dt), (prob,), bw, "binary_cross_entropy")
