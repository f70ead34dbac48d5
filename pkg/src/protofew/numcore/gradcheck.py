"""Central finite differences, the gradient oracle used across the test suite."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ContractViolation, NumericDomainError
from .tensor import Tensor, as_tensor


def _scalar_of(y) -> float:
    if isinstance(y, Tensor):
        if y.size != 1:
            raise ContractViolation(f"finite_diff_gradient: f returned shape {y.shape}")
        val = float(y.data.reshape(-1)[0])
    else:
        val = float(y)
    if not np.isfinite(val):
        raise NumericDomainError("finite_diff_gradient: f returned a non-finite value")
    return val


def finite_diff_gradient(f: Callable, x: Tensor | np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Elementwise central difference (f(x+h e_i) - f(x-h e_i)) / 2h.

    ``f`` must be deterministic and map a Tensor to a scalar. Evaluation
    happens at perturbed copies of ``x``; ``x`` itself is left untouched.
    """
    if step <= 0:
        raise ContractViolation(f"finite_diff_gradient: step must be positive, got {step}")
    x = as_tensor(x)
    base = x.data
    grad = np.zeros_like(base, dtype=np.float64)
    flat = grad.reshape(-1)
    for i in range(base.size):
        hi = base.copy().reshape(-1)
        lo = base.copy().reshape(-1)
        hi[i] += step
        lo[i] -= step
        f_hi = _scalar_of(f(Tensor(hi.reshape(base.shape))))
        f_lo = _scalar_of(f(Tensor(lo.reshape(base.shape))))
        flat[i] = (f_hi - f_lo) / (2.0 * step)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray,
                   grad_floor: float = 1e-8) -> float:
    """Max relative disagreement over entries whose magnitude clears the floor."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    mask = (np.abs(analytic) > grad_floor) | (np.abs(numeric) > grad_floor)
    if not mask.any():
        return 0.0
    denom = np.maximum(np.abs(analytic[mask]), np.abs(numeric[mask]))
    return float(np.max(np.abs(analytic[mask] - numeric[mask]) / denom))
