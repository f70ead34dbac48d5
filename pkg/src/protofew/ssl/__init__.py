"""Self-supervised pretraining: augmentation, contrastive losses, the
training loop, and the mutual-information bound checker."""

from .augment import AugmentConfig, ViewPair, augment_one, augment_pair, sample_crop
from .losses import SCORE_CLIP, ScoreTable, amdim_loss, amdim_terms, nce_loss, score_pairs
from .mi import BoundReport, DiscreteJoint, exact_critic, mi_discrete, verify_infonce_bound
from .pretrain import PretrainConfig, pretrain, write_loss_curve

__all__ = [
    "AugmentConfig", "BoundReport", "DiscreteJoint", "PretrainConfig", "SCORE_CLIP",
    "ScoreTable", "ViewPair", "amdim_loss", "amdim_terms", "augment_one", "augment_pair",
    "exact_critic", "mi_discrete", "nce_loss", "pretrain", "sample_crop", "score_pairs",
    "verify_infonce_bound", "write_loss_curve",
]
