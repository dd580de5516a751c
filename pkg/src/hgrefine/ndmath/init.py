import numpy as np

from .tensor import Tensor


def glorot(rng, fan_in, fan_out, name=None, dtype=np.float64):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype), requires_grad=True, name=name)


def zeros(shape, name=None, dtype=np.float64):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)
