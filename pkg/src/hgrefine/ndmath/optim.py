"""Adam with L2 penalty folded into the gradient."""
from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params, **kw):
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params], **kw)


def adam_step(params, grads, lr, weight_decay, state):
    """Update ``params`` in place; the L2 term ``weight_decay * param`` is added to each gradient."""
    if len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter list")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name or i}")
        if state.m[i].shape != p.data.shape:
            raise ValueError(f"state shape {state.m[i].shape} != param shape {p.data.shape}")
        if weight_decay:
            g = g + weight_decay * p.data
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        mhat = state.m[i] / c1
        vhat = state.v[i] / c2
        p.data = (p.data - lr * mhat / (np.sqrt(vhat) + state.eps)).astype(p.data.dtype)
    return params


@dataclass
class Adam:
    params: list
    lr: float = 1e-3
    weight_decay: float = 0.0
    state: AdamState = field(default=None)

    def __post_init__(self):
        if self.state is None:
            self.state = AdamState.zeros_like(self.params)

    def step(self, grads):
        adam_step(self.params, grads, self.lr, self.weight_decay, self.state)
