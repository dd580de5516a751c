"""Central finite-difference comparison against tape gradients."""
import numpy as np

from .tensor import Tape, backward


def relative_error(analytic, numeric, floor=1e-10):
    """Norm-based relative error.

    The denominator is floored at ``floor``: gradients smaller than that are
    below what a central difference can resolve, so two vanishing gradients
    compare as equal instead of as pure noise.
    """
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(num / den)


def numeric_grad(fn, param, eps=1e-5):
    g = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    gflat = g.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = fn().item()
        flat[k] = orig - eps
        down = fn().item()
        flat[k] = orig
        gflat[k] = (up - down) / (2.0 * eps)
    return g


def check_gradients(fn, params, eps=1e-5):
    """Return ``{param name or index: relative error}`` for a scalar-valued ``fn``.

    ``fn`` is called with no arguments and must read ``params`` through their
    ``.data`` so that perturbations are seen.
    """
    with Tape() as tape:
        loss = fn()
    analytic = backward(tape, loss, params)
    out = {}
    for i, (p, ga) in enumerate(zip(params, analytic)):
        gn = numeric_grad(fn, p, eps)
        out[p.name or str(i)] = relative_error(ga, gn)
    return out
