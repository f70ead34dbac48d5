"""Two-view augmentation for contrastive pretraining.

Each source image yields two independent draws of: random resized crop,
horizontal flip, color jitter. All randomness flows through the caller's
generator, so a fixed seed reproduces the exact view pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import resize_bilinear
from ..errors import ContractViolation

_GRAY_WEIGHTS = np.array([0.299, 0.587, 0.114], dtype=np.float32).reshape(3, 1, 1)


@dataclass(frozen=True)
class AugmentConfig:
    crop_area: tuple = (0.3, 1.0)     # crop area as a fraction of the image
    crop_aspect: tuple = (0.75, 4.0 / 3.0)
    flip_p: float = 0.5
    jitter: float = 0.4               # brightness/contrast/saturation half-range

    @staticmethod
    def identity() -> "AugmentConfig":
        """Zero-strength config: augment_pair returns the input unchanged."""
        return AugmentConfig(crop_area=(1.0, 1.0), crop_aspect=(1.0, 1.0),
                             flip_p=0.0, jitter=0.0)

    @property
    def is_identity(self) -> bool:
        return (self.crop_area == (1.0, 1.0) and self.crop_aspect == (1.0, 1.0)
                and self.flip_p == 0.0 and self.jitter == 0.0)


@dataclass
class ViewPair:
    """Row i of both views derives from the same source image (shared context)."""

    x_a: np.ndarray          # [B, 3, R, R]
    x_b: np.ndarray          # [B, 3, R, R]
    provenance: np.ndarray   # [B] source-image indices


def sample_crop(rng: np.random.Generator, h: int, w: int, cfg: AugmentConfig):
    """Crop box (top, left, crop_h, crop_w), always within image bounds."""
    area = h * w
    for _ in range(10):
        target = area * rng.uniform(cfg.crop_area[0], cfg.crop_area[1])
        aspect = np.exp(rng.uniform(np.log(cfg.crop_aspect[0]), np.log(cfg.crop_aspect[1])))
        cw = int(round(np.sqrt(target * aspect)))
        ch = int(round(np.sqrt(target / aspect)))
        if 0 < cw <= w and 0 < ch <= h:
            top = int(rng.integers(0, h - ch + 1))
            left = int(rng.integers(0, w - cw + 1))
            return top, left, ch, cw
    side = min(h, w)
    return (h - side) // 2, (w - side) // 2, side, side


def _jitter(img: np.ndarray, rng: np.random.Generator, strength: float) -> np.ndarray:
    lo, hi = max(0.0, 1.0 - strength), 1.0 + strength
    fb, fc, fs = rng.uniform(lo, hi, 3)
    if fb != 1.0:
        img = img * np.float32(fb)
    if fc != 1.0:
        m = np.float32((img * _GRAY_WEIGHTS).sum(axis=0).mean())
        img = (img - m) * np.float32(fc) + m
    if fs != 1.0:
        gray = (img * _GRAY_WEIGHTS).sum(axis=0, keepdims=True)
        img = gray + (img - gray) * np.float32(fs)
    return np.clip(img, 0.0, 1.0)


def augment_one(img: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """One augmentation draw for a CHW [0,1] image, output size preserved."""
    _, h, w = img.shape
    top, left, ch, cw = sample_crop(rng, h, w, cfg)
    flip = rng.uniform() < cfg.flip_p
    if (top, left, ch, cw) != (0, 0, h, w):
        img = resize_bilinear(np.ascontiguousarray(img[:, top:top + ch, left:left + cw]), h)
    if flip:
        img = img[:, :, ::-1]
    if cfg.jitter > 0.0:
        img = _jitter(img, rng, cfg.jitter)
    else:
        rng.uniform(0.0, 0.0, 3)  # keep the stream aligned across configs
    return np.ascontiguousarray(img, dtype=np.float32)


def augment_pair(images: np.ndarray, rng: np.random.Generator,
                 cfg: AugmentConfig | None = None) -> ViewPair:
    """Two independent augmentation draws per image.

    ``images``: [B, 3, R, R] float in [0, 1], already at pretrain resolution.
    """
    cfg = cfg or AugmentConfig()
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4 or images.shape[1] != 3:
        raise ContractViolation(f"augment_pair: expected [B, 3, R, R], got {images.shape}")
    if cfg.is_identity:
        return ViewPair(x_a=images.copy(), x_b=images.copy(),
                        provenance=np.arange(images.shape[0]))
    x_a = np.empty_like(images)
    x_b = np.empty_like(images)
    for i in range(images.shape[0]):
        x_a[i] = augment_one(images[i], rng, cfg)
        x_b[i] = augment_one(images[i], rng, cfg)
    return ViewPair(x_a=x_a, x_b=x_b, provenance=np.arange(images.shape[0]))
