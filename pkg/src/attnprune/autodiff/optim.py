"""SGD with momentum."""

from __future__ import annotations

import numpy as np

from ..errors import InvalidInputError, InvalidStateError


def sgd_momentum_step(params, lr, momentum, velocity, weight_decay=0.0):
    """One update ``v <- momentum * v + grad; p <- p - lr * v``, then clear grads.

    ``velocity`` maps ``id(param)`` to its buffer and is updated in place.
    Frozen parameters are skipped.
    """
    if lr < 0:
        raise InvalidInputError("learning rate must be non-negative")
    if not 0.0 <= momentum < 1.0:
        raise InvalidInputError("momentum must lie in [0, 1)")
    live = [p for p in params if p.requires_grad]
    for p in live:
        if p.grad is None:
            raise InvalidStateError(f"parameter {p.name or p.shape} has no gradient")
    for p in live:
        g = p.grad
        if weight_decay:
            g = g + weight_decay * p.data
        v = velocity.get(id(p))
        v = g.copy() if v is None else momentum * v + g
        velocity[id(p)] = v
        p.data = (p.data - p.data.dtype.type(lr) * v).astype(p.data.dtype, copy=False)
        p.grad = None


class SGD:
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity: dict[int, np.ndarray] = {}

    def step(self):
        sgd_momentum_step(self.params, self.lr, self.momentum, self.velocity, self.weight_decay)

    def zero_grad(self):
        for p in self.params:
            p.grad = None
