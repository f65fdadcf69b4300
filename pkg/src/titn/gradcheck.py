"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from titn.tensor import Tensor


def numerical_grad(f: Callable[[], Tensor], param: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f / d param by central differences, perturbing ``param.data`` in place."""
    grad = np.zeros_like(param.data)
    flat = param.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = f().item()
        flat[i] = old - h
        down = f().item()
        flat[i] = old
        out[i] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """||a - n|| / max(||a||, ||n||), 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5,
                    names: Sequence[str] | None = None) -> dict:
    """Relative error of the analytic gradient for every tensor in ``params``.

    ``f`` must rebuild the graph from the current parameter values on each call.
    """
    for p in params:
        p.grad = None
    f().backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    names = list(names) if names is not None else [str(i) for i in range(len(params))]
    return {n: relative_error(a, numerical_grad(f, p, h)) for n, p, a in zip(names, params, analytic)}
