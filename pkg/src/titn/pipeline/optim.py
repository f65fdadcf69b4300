"""SGD with momentum and a cosine-annealed learning rate."""

from __future__ import annotations

import math
from typing import Optional

import numpy as np


def cosine_lr(t: float, T: float, lr_max: float, lr_min: float = 0.0) -> float:
    if T <= 0 or not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / T))


def sgd_step(params: list, grads: list, state: list, lr: float, momentum: float = 0.9,
             weight_decay: float = 0.0, decay_mask: Optional[list] = None) -> None:
    """In-place update of numpy ``params``.

    Classic (coupled) form::

        v <- momentum * v + grad + weight_decay * param
        param <- param - lr * v

    ``state`` holds one velocity array (or ``None`` before the first step)
    per parameter and is updated in place. ``decay_mask[i] == False``
    exempts parameter ``i`` from weight decay.
    """
    if not (len(params) == len(grads) == len(state)):
        raise ValueError("params, grads and state must have equal length")
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p)
        if g.shape != p.shape:
            raise ValueError(f"parameter {i}: grad shape {g.shape} != param shape {p.shape}")
        d = g
        if weight_decay and (decay_mask is None or decay_mask[i]):
            d = d + weight_decay * p
        v = d if state[i] is None else momentum * state[i] + d
        state[i] = v
        p -= lr * v


class SGD:
    """Stateful wrapper binding :func:`sgd_step` to a model's tensors."""

    def __init__(self, named_params: list, momentum: float = 0.9, weight_decay: float = 0.0,
                 no_decay=lambda name: False):
        self.names = [n for n, _ in named_params]
        self.tensors = [t for _, t in named_params]
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.decay_mask = [not no_decay(n) for n in self.names]
        self.state: list = [None] * len(self.tensors)

    def step(self, lr: float) -> None:
        sgd_step([t.data for t in self.tensors], [t.grad for t in self.tensors], self.state,
                 lr, self.momentum, self.weight_decay, self.decay_mask)

    def zero_grad(self) -> None:
        for t in self.tensors:
            t.grad = None
