"""Contrastive scores and the multi-scale NCE objective.

The objective contrasts three feature pairings across the two views:
global-to-small-grid, global-to-large-grid, and small-grid-to-small-grid.
Local grids contribute one square score table per spatial position
(positives on the diagonal, the rest of the batch as negatives), and the
per-position losses are averaged; the total is symmetrized over the two
views.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import numcore as nc
from ..encoder import MultiScaleFeatures
from ..errors import ContractViolation
from ..numcore import Tensor

SCORE_CLIP = 20.0


@dataclass
class ScoreTable:
    """[B, B] pair scores; entry (i, j) scores view-a item i against
    view-b item j, so matched pairs sit on the diagonal."""

    scores: Tensor

    @property
    def batch_size(self) -> int:
        return self.scores.shape[0]


def _clip(scores: Tensor, clip: float | None) -> Tensor:
    if clip is None:
        return scores
    return nc.tanh_clip(scores, clip)


def score_pairs(feats_a, feats_b, clip: float | None = SCORE_CLIP) -> ScoreTable:
    """All-pairs dot products in the shared embedding space, soft-clipped
    to |s| <= clip so exp() stays in range at float32."""
    a = nc.as_tensor(feats_a)
    b = nc.as_tensor(feats_b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ContractViolation(
            f"score_pairs: feature shapes {a.shape} and {b.shape} do not conform")
    if a.shape[0] != b.shape[0]:
        raise ContractViolation(
            f"score_pairs: batch sizes differ ({a.shape[0]} vs {b.shape[0]})")
    return ScoreTable(scores=_clip(nc.dot_product_pairwise(a, b), clip))


def _eye_like(scores: Tensor) -> Tensor:
    b = scores.shape[0]
    eye = np.eye(b, dtype=scores.dtype)
    if scores.data.ndim == 3:
        eye = np.broadcast_to(eye[:, :, None], scores.shape).copy()
    return nc.as_tensor(eye)


def nce_loss(table) -> Tensor:
    """Mean over rows of -log( exp(s_ii) / sum_j exp(s_ij) ).

    Zero when the positive dominates every negative; ln(B) when a row is
    constant; always nonnegative.
    """
    scores = table.scores if isinstance(table, ScoreTable) else nc.as_tensor(table)
    if scores.data.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise ContractViolation(f"nce_loss: score table must be square, got {scores.shape}")
    if scores.shape[0] < 2:
        raise ContractViolation("nce_loss: need batch >= 2 (no negatives otherwise)")
    lse = nc.log_sum_exp(scores, axis=1)
    diag = nc.tsum(nc.mul(scores, _eye_like(scores)), axis=1)
    return nc.tmean(nc.add(lse, nc.neg(diag)))


def _stacked_nce(scores: Tensor) -> Tensor:
    """NCE averaged over stacked [B, B, P] per-position tables."""
    lse = nc.log_sum_exp(scores, axis=1)                       # [B, P]
    diag = nc.tsum(nc.mul(scores, _eye_like(scores)), axis=1)  # [B, P]
    return nc.add(nc.tmean(lse), nc.neg(nc.tmean(diag)))


def _as_positions(grid: Tensor) -> Tensor:
    b, d, s1, s2 = grid.shape
    return nc.reshape(grid, (b, d, s1 * s2))


def _check_features(name: str, fa: MultiScaleFeatures, fb: MultiScaleFeatures):
    for attr in ("f_g", "f_s1", "f_s2"):
        sa, sb = getattr(fa, attr).shape, getattr(fb, attr).shape
        if sa != sb:
            raise ContractViolation(f"{name}: {attr} shapes differ ({sa} vs {sb})")
    if fa.f_g.shape[0] < 2:
        raise ContractViolation(f"{name}: need batch >= 2")
    nrkhs = fa.f_g.shape[1]
    if fa.f_s1.shape[1] != nrkhs or fa.f_s2.shape[1] != nrkhs:
        raise ContractViolation(f"{name}: embedding dims differ across heads")


def amdim_terms(fa: MultiScaleFeatures, fb: MultiScaleFeatures,
                clip: float | None = SCORE_CLIP) -> tuple:
    """The three directional loss terms (a -> b): global/small-grid,
    global/large-grid, small-grid/small-grid."""
    _check_features("amdim_terms", fa, fb)
    s1_b = _as_positions(fb.f_s1)
    s2_b = _as_positions(fb.f_s2)
    t_g1 = _stacked_nce(_clip(nc.global_local_scores(fa.f_g, s1_b), clip))
    t_g2 = _stacked_nce(_clip(nc.global_local_scores(fa.f_g, s2_b), clip))
    t_11 = _stacked_nce(_clip(nc.position_dot_scores(_as_positions(fa.f_s1), s1_b), clip))
    return t_g1, t_g2, t_11


def amdim_loss(fa: MultiScaleFeatures, fb: MultiScaleFeatures,
               clip: float | None = SCORE_CLIP) -> Tensor:
    """Multi-scale contrastive loss between two views, symmetrized by
    averaging the a->b and b->a directions."""
    fwd = amdim_terms(fa, fb, clip)
    rev = amdim_terms(fb, fa, clip)
    total = fwd[0]
    for t in (*fwd[1:], *rev):
        total = nc.add(total, t)
    return nc.scale(total, 0.5)
