"""Dense tensors and the operation tape used for reverse-mode gradients."""

from __future__ import annotations

import threading

import numpy as np

from ..errors import InvalidInputError

_DEFAULT_DTYPE = np.float32
_local = threading.local()


def set_default_dtype(dtype) -> None:
    global _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DEFAULT_DTYPE


class Tensor:
    """An n-dimensional array with an optional gradient buffer.

    ``grad`` is only ever written for tensors with ``requires_grad=True``.
    Gradient arrays are never modified in place, so they may alias each other.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else _DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # Arithmetic sugar, mostly for tests and small losses.
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops

        if isinstance(other, Tensor):
            return ops.mul(self, other)
        return ops.scale(self, other)

    __rmul__ = __mul__

    def sum(self):
        from . import ops

        return ops.sum(self)


class _Record:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Tape:
    """Ordered record of operations executed while the tape is active.

    Use as a context manager; every differentiable op run inside the block
    whose inputs need gradients is recorded. A tape serves one forward pass.
    """

    def __init__(self):
        self.records: list[_Record] = []
        self._outputs: set[int] = set()

    def record(self, out: Tensor, inputs, backward) -> None:
        self.records.append(_Record(out, tuple(inputs), backward))
        self._outputs.add(id(out))

    def __enter__(self):
        stack = getattr(_local, "stack", None)
        if stack is None:
            stack = _local.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _local.stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


def active_tape() -> Tape | None:
    stack = getattr(_local, "stack", None)
    if stack:
        return stack[-1]
    return None


def record(out: Tensor, inputs, backward) -> Tensor:
    """Mark ``out`` as produced from ``inputs``; record it if a tape is active."""
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape = active_tape()
        if tape is not None:
            tape.record(out, inputs, backward)
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Fill ``grad`` of every gradient-requiring tensor reachable from ``loss``."""
    if loss.size != 1:
        raise InvalidInputError(f"backward needs a scalar loss, got shape {loss.shape}")
    if id(loss) not in tape._outputs:
        raise InvalidInputError("loss was not produced on this tape")
    loss.grad = np.ones_like(loss.data)
    for rec in reversed(tape.records):
        g = rec.out.grad
        if g is None:
            continue
        grads = rec.backward(g)
        for inp, gi in zip(rec.inputs, grads):
            if gi is None or not inp.requires_grad:
                continue
            inp.grad = gi if inp.grad is None else inp.grad + gi
