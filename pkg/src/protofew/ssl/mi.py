"""Discrete mutual information and a Monte-Carlo check of the contrastive
lower bound.

For a known joint distribution the optimal critic is the log density
ratio log p(x,y)/(p(x)p(y)); with that critic, ln(batch) minus the NCE
loss is (in expectation) a lower bound on the true mutual information.
``verify_infonce_bound`` samples batches from the joint and checks the
inequality up to Monte-Carlo error.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from ..errors import ContractViolation, NumericDomainError
from ..seeds import MI_SAMPLER, derive_rng

_MASS_TOL = 1e-12


@dataclass(frozen=True)
class DiscreteJoint:
    """A joint pmf over two finite alphabets: nonnegative, total mass 1."""

    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if p.ndim != 2:
            raise ContractViolation(f"DiscreteJoint: expected a matrix, got shape {p.shape}")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise ContractViolation("DiscreteJoint: entries must be finite and nonnegative")
        if abs(p.sum() - 1.0) > _MASS_TOL:
            raise ContractViolation(f"DiscreteJoint: total mass {p.sum()!r} != 1")
        object.__setattr__(self, "p", p)

    @property
    def marginal_x(self) -> np.ndarray:
        return self.p.sum(axis=1)

    @property
    def marginal_y(self) -> np.ndarray:
        return self.p.sum(axis=0)


def mi_discrete(joint: DiscreteJoint) -> float:
    """Mutual information sum p(x,y) log[p(x,y) / (p(x)p(y))], natural log,
    with the 0 log 0 := 0 convention. Always >= 0 up to rounding."""
    p = joint.p
    px = joint.marginal_x
    py = joint.marginal_y
    mask = p > 0
    ratio = p[mask] / (np.outer(px, py)[mask])
    return float(np.sum(p[mask] * np.log(ratio)))


def exact_critic(joint: DiscreteJoint) -> np.ndarray:
    """Pointwise log density ratio; -inf marks zero-mass cells so they
    contribute nothing inside log-sum-exp."""
    p = joint.p
    denom = np.outer(joint.marginal_x, joint.marginal_y)
    with np.errstate(divide="ignore"):
        critic = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)) - np.log(denom), -np.inf)
    return critic


@dataclass(frozen=True)
class BoundReport:
    mi: float
    mean_bound: float
    stderr: float
    batch_size: int
    num_batches: int

    @property
    def holds(self) -> bool:
        return self.mean_bound <= self.mi + 3.0 * self.stderr

    @property
    def epsilon_stat(self) -> float:
        return 3.0 * self.stderr


def verify_infonce_bound(joint: DiscreteJoint, batch_size: int, num_batches: int,
                         rng: np.random.Generator | int) -> BoundReport:
    """Estimate ln(B) - E[NCE loss] under the exact critic and compare
    against the true mutual information.

    Each batch is ``batch_size`` iid draws from the joint; scores are the
    critic evaluated on all (x_i, y_j) cross pairs, positives on the
    diagonal. Zero-mass cross pairs score -inf and are masked by the
    log-sum-exp.
    """
    if batch_size < 2:
        raise ContractViolation("verify_infonce_bound: batch_size must be >= 2")
    if num_batches < 2:
        raise ContractViolation("verify_infonce_bound: num_batches must be >= 2")
    if isinstance(rng, (int, np.integer)):
        rng = derive_rng(int(rng), MI_SAMPLER)
    p = joint.p
    m, n = p.shape
    flat = p.reshape(-1)
    critic = exact_critic(joint)

    draws = rng.choice(m * n, size=num_batches * batch_size, p=flat)
    xs, ys = np.unravel_index(draws, (m, n))
    xs = xs.reshape(num_batches, batch_size)
    ys = ys.reshape(num_batches, batch_size)

    scores = critic[xs[:, :, None], ys[:, None, :]]          # [N, B, B]
    diag = np.diagonal(scores, axis1=1, axis2=2)
    if not np.all(np.isfinite(diag)):
        raise NumericDomainError("verify_infonce_bound: sampled a zero-mass pair")
    lse = logsumexp(scores, axis=2)                          # [N, B]
    per_batch_nce = (lse - diag).mean(axis=1)                # [N]
    bounds = np.log(batch_size) - per_batch_nce
    mean_bound = float(bounds.mean())
    stderr = float(bounds.std(ddof=1) / np.sqrt(num_batches))
    return BoundReport(mi=mi_discrete(joint), mean_bound=mean_bound, stderr=stderr,
                       batch_size=batch_size, num_batches=num_batches)
