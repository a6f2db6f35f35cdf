"""Central finite-difference checks for scalar functions of tensors."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, no_grad


def numerical_grads(f: Callable[[], Tensor], inputs: Sequence[Tensor],
                    eps: float = 1e-5) -> list[np.ndarray]:
    """Central differences of the scalar ``f()`` w.r.t. each input, in place."""
    grads = []
    with no_grad():
        for x in inputs:
            g = np.zeros_like(x.data)
            flat = x.data.reshape(-1)
            gflat = g.reshape(-1)
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + eps
                hi = f().item()
                flat[k] = orig - eps
                lo = f().item()
                flat[k] = orig
                gflat[k] = (hi - lo) / (2 * eps)
            grads.append(g)
    return grads


def analytic_grads(f: Callable[[], Tensor], inputs: Sequence[Tensor]) -> list[np.ndarray]:
    for x in inputs:
        x.requires_grad = True
        x.grad = None
    f().backward()
    return [x.grad if x.grad is not None else np.zeros_like(x.data) for x in inputs]


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b|| / max(||a||, ||b||), with 0 when both vanish."""
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor],
                    eps: float = 1e-5) -> float:
    """Worst relative error between analytic and numerical gradients."""
    ana = analytic_grads(f, inputs)
    num = numerical_grads(f, inputs, eps)
    return max(relative_error(a, n) for a, n in zip(ana, num))
