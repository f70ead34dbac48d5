"""Adam with bias correction, operating on named parameter dicts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ContractViolation, NumericDomainError
from .tensor import Tensor


@dataclass
class AdamState:
    """Optimizer state: per-parameter first/second moments plus step count.

    Moments are zero-initialized the first time a parameter is seen; the
    step counter increases by exactly one per ``adam_step``.
    """

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.lr >= 0 and 0 < self.beta1 < 1 and 0 < self.beta2 < 1
                and self.epsilon > 0):
            raise ContractViolation(
                f"AdamState: bad hyperparameters lr={self.lr} beta1={self.beta1} "
                f"beta2={self.beta2} epsilon={self.epsilon}")


def adam_step(params: Mapping[str, Tensor], grads: Mapping, state: AdamState) -> None:
    """One bias-corrected Adam update, in place on ``params``.

    ``grads`` maps parameter name to gradient array (missing names are
    treated as zero gradient, which leaves the parameter and its moments
    unchanged).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        elif isinstance(g, Tensor):
            g = g.data
        if g.shape != p.shape:
            raise ContractViolation(
                f"adam_step: gradient shape {g.shape} != parameter {name!r} shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericDomainError(f"adam_step: non-finite gradient for {name!r}")
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        update = (state.lr * (m / c1)) / (np.sqrt(v / c2) + state.epsilon)
        p.data -= update.astype(p.dtype, copy=False)
