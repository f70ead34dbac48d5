"""Self-supervised pretraining loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import numcore as nc
from ..data import ImageDataset, resize_bilinear
from ..encoder import MultiScaleEncoder
from ..errors import ContractViolation, NumericDomainError
from ..seeds import PRETRAIN_BATCH, PRETRAIN_SHUFFLE, derive_rng
from .augment import AugmentConfig, augment_pair
from .losses import SCORE_CLIP, amdim_loss


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 2e-4
    seed: int = 0
    resolution: int = 32
    clip: float = SCORE_CLIP
    augment: AugmentConfig = field(default_factory=AugmentConfig)


def _raw_images(dataset: ImageDataset, resolution: int) -> np.ndarray:
    """All images as unnormalized [N, 3, R, R] float32 in [0, 1]."""
    records = dataset.all_records()
    out = np.empty((len(records), 3, resolution, resolution), dtype=np.float32)
    for i, rec in enumerate(records):
        chw = np.ascontiguousarray(rec.load().transpose(2, 0, 1))
        out[i] = resize_bilinear(chw, resolution)
    return out


def _normalize(batch: np.ndarray, dataset: ImageDataset) -> np.ndarray:
    mean = np.asarray(dataset.normalization.mean, dtype=np.float32).reshape(1, 3, 1, 1)
    std = np.asarray(dataset.normalization.std, dtype=np.float32).reshape(1, 3, 1, 1)
    return (batch - mean) / std


def pretrain(dataset: ImageDataset, encoder: MultiScaleEncoder, config: PretrainConfig,
             checkpoint_path=None, log_path=None):
    """Train the encoder on unlabeled images with the two-view objective.

    Returns ``(encoder, curve)`` where curve rows are
    ``(epoch, mean_loss, wall_seconds)``. A non-finite loss aborts with the
    offending batch's seed tuple in the message.
    """
    if config.epochs < 1 or config.batch_size < 2:
        raise ContractViolation(
            f"pretrain: need epochs >= 1 and batch_size >= 2, got {config}")
    if config.resolution != encoder.config.input_resolution:
        raise ContractViolation(
            f"pretrain: resolution {config.resolution} != encoder input "
            f"{encoder.config.input_resolution}")
    images = _raw_images(dataset, config.resolution)
    if images.shape[0] < config.batch_size:
        raise ContractViolation(
            f"pretrain: dataset has {images.shape[0]} images < batch {config.batch_size}")
    encoder.train_mode()
    state = nc.AdamState(lr=config.lr)
    curve = []
    start = time.perf_counter()
    for epoch in range(config.epochs):
        order = derive_rng(config.seed, PRETRAIN_SHUFFLE, epoch).permutation(images.shape[0])
        losses = []
        for b, lo in enumerate(range(0, images.shape[0], config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            if idx.size < 2:
                continue
            rng = derive_rng(config.seed, PRETRAIN_BATCH, epoch, b)
            pair = augment_pair(images[idx], rng, config.augment)
            fa = encoder.encode(_normalize(pair.x_a, dataset))
            fb = encoder.encode(_normalize(pair.x_b, dataset))
            loss = amdim_loss(fa, fb, clip=config.clip)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericDomainError(
                    f"pretrain: non-finite loss at batch seed "
                    f"({config.seed}, epoch={epoch}, batch={b})")
            grads = nc.backward(loss, encoder.params.values())
            nc.adam_step(encoder.params, {n: p.grad for n, p in encoder.params.items()},
                         state)
            losses.append(value)
        curve.append((epoch, float(np.mean(losses)), time.perf_counter() - start))
    if checkpoint_path is not None:
        encoder.save(checkpoint_path)
    if log_path is not None:
        write_loss_curve(log_path, curve)
    return encoder, curve


def write_loss_curve(path, curve) -> None:
    lines = ["epoch,mean_loss,wall_seconds"]
    lines += [f"{e},{loss!r},{secs:.3f}" for e, loss, secs in curve]
    Path(path).write_text("\n".join(lines) + "\n")
