"""Central finite-difference gradient checks (run under ``default_dtype(np.float64)``)."""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

from captioner.errors import ContractError
from captioner.numerics.tensor import Tensor, backward, no_grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` in the 2-norm; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grad(fn: Callable[[], Tensor], x: Tensor, eps: float = 1e-6) -> np.ndarray:
    """Perturb ``x.data`` in place one element at a time."""
    if x.dtype != np.float64:
        raise ContractError("finite differences need float64 tensors")
    grad = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    out = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + eps
            up = fn().item()
            flat[i] = old - eps
            down = fn().item()
            flat[i] = old
            out[i] = (up - down) / (2 * eps)
    return grad


def check_gradients(fn: Callable[[], Tensor], inputs: Mapping[str, Tensor], eps: float = 1e-6) -> dict[str, float]:
    """Relative error of the tape gradient against finite differences, per input."""
    for t in inputs.values():
        t.grad = None
        t.requires_grad = True
    backward(fn())
    analytic = {k: np.zeros_like(t.data) if t.grad is None else t.grad.copy() for k, t in inputs.items()}
    return {k: relative_error(analytic[k], numeric_grad(fn, t, eps)) for k, t in inputs.items()}
