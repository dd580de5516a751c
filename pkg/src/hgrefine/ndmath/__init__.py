"""Minimal dense-tensor engine with tape-based reverse-mode autodiff."""
from .gradcheck import check_gradients, numeric_grad, relative_error
from .init import glorot, zeros
from .ops import (
    add,
    add_bias,
    binary_cross_entropy,
    concat_cols,
    concat_rows,
    const,
    cross_entropy,
    dropout,
    edge_dot,
    elu,
    gather_rows,
    leaky_relu,
    matmul,
    mean_rows,
    mul,
    relu,
    row_softmax,
    scale,
    scale_by,
    segment_softmax,
    segment_weighted_sum,
    sigmoid,
    slice_cols,
    slice_rows,
    sum_all,
    tanh,
)
from .optim import Adam, AdamState, adam_step
from .tensor import NonFiniteError, Tape, Tensor, as_tensor, backward, record
