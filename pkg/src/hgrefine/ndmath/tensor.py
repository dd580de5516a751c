"""Dense tensors recorded on an explicit tape for reverse-mode differentiation."""
import threading

import numpy as np

_state = threading.local()

CHECK_FINITE = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class Tensor:
    """A 2-D (or 1-D) float array with optional gradient tracking.

    ``requires_grad=True`` marks a leaf parameter. Intermediate results are
    *tracked* when produced inside an active :class:`Tape` from tracked inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "tracked", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.tracked = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"<Tensor{tag} shape={self.shape} grad={self.requires_grad}>"


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Records ops executed inside ``with Tape() as tape:``.

    Records are appended in execution order, so iterating them in reverse is a
    valid reverse topological order of the computation graph.
    """

    def __init__(self):
        self.records = []

    def __enter__(self):
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def __len__(self):
        return len(self.records)


def active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def record(out_data, inputs, backward, opname="op"):
    """Wrap ``out_data`` as a Tensor and append a tape record if needed.

    ``backward(grad_out)`` must return one gradient (or None) per input.
    """
    if CHECK_FINITE and not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"{opname} produced non-finite values")
    out = Tensor(out_data)
    tape = active_tape()
    if tape is not None and any(t.tracked for t in inputs):
        out.tracked = True
        tape.records.append(_Record(out, inputs, backward))
    return out


def backward(tape, loss, params=None):
    """Accumulate d(loss)/d(param) for every leaf reachable on ``tape``.

    Returns a list of gradients aligned with ``params`` (zeros for params the
    loss does not depend on) and also stores them on ``param.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.out), None)
        if g is None:
            continue
        in_grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, in_grads):
            if gi is None or not inp.tracked:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
            if inp.requires_grad:
                leaves[key] = inp
    if params is None:
        params = list(leaves.values())
    out = []
    for p in params:
        g = grads.get(id(p))
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=p.dtype).reshape(p.shape)
        p.grad = g
        out.append(g)
    return out
