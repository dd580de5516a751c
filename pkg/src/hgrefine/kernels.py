"""Backend selection for the hot loops.

The compiled extension is used when importable; set ``HGREFINE_PURE=1`` to
force the numpy implementations. All wrappers accept any real dtype and
accumulate in float64.
"""
import os

import numpy as np

from . import _kernels_py

try:
    if os.environ.get("HGREFINE_PURE", "") not in ("", "0"):
        raise ImportError("pure backend requested")
    from . import _kernels as _impl

    BACKEND = "cython"
except ImportError:
    _impl = _kernels_py
    BACKEND = "python"


def _f(x):
    return np.ascontiguousarray(x, dtype=np.float64)


def _i(x):
    return np.ascontiguousarray(x, dtype=np.int64)


def use_backend(name):
    """Switch backend at runtime ("cython" or "python"); returns the previous one."""
    global _impl, BACKEND
    prev = BACKEND
    if name == "python":
        _impl = _kernels_py
    elif name == "cython":
        from . import _kernels

        _impl = _kernels
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name
    return prev


def segment_softmax(logits, indptr):
    return _impl.segment_softmax(_f(logits), _i(indptr))


def segment_softmax_backward(weights, grad, indptr):
    return _impl.segment_softmax_backward(_f(weights), _f(grad), _i(indptr))


def segment_spmm(weights, x, src, indptr):
    return _impl.segment_spmm(_f(weights), _f(x), _i(src), _i(indptr))


def segment_spmm_backward(grad, weights, x, src, indptr, need_w=True, need_x=True):
    return _impl.segment_spmm_backward(
        _f(grad), _f(weights), _f(x), _i(src), _i(indptr), bool(need_w), bool(need_x)
    )


def edge_dot(a, b, ia, ib):
    return _impl.edge_dot(_f(a), _f(b), _i(ia), _i(ib))


def edge_dot_backward(grad, a, b, ia, ib):
    return _impl.edge_dot_backward(_f(grad), _f(a), _f(b), _i(ia), _i(ib))


def scatter_add_rows(grad, idx, n):
    return _impl.scatter_add_rows(_f(grad), _i(idx), int(n))


def count_paths(indptr1, indices1, indptr2, indices2, n_out):
    return _impl.count_paths(_i(indptr1), _i(indices1), _i(indptr2), _i(indices2), int(n_out))
