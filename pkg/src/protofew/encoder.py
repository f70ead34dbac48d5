"""Convolutional embedding network with one global and two local heads.

A stride-2 stem followed by ``ndepth`` residual blocks (constant channel
width, downsampling every second block). Two designated intermediate
grids are adaptively pooled to the configured local scales and projected
by 1x1 convolutions into the shared embedding space; the pooled top
feature goes through a linear head into the same space, so all contrast
scores are dot products in one geometry.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numcore as nc
from .errors import ConfigError, ContractViolation, DataError
from .numcore import Tensor
from .seeds import INIT, derive_rng

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture knobs. Defaults are the desk-scale setup; the full-scale
    run uses (ndf=192, ndepth=8, nrkhs=1536, input_resolution=128)."""

    ndf: int = 32
    ndepth: int = 4
    nrkhs: int = 64
    input_resolution: int = 32
    local_scales: tuple = (5, 7)

    def validate(self) -> None:
        if min(self.ndf, self.ndepth, self.nrkhs, self.input_resolution) < 1:
            raise ConfigError(f"encoder config fields must be positive: {self}")
        if len(self.local_scales) != 2 or min(self.local_scales) < 1:
            raise ConfigError(f"local_scales must be two positive ints: {self.local_scales}")
        if self.input_resolution < 8:
            raise ConfigError(f"input_resolution {self.input_resolution} below minimum 8")


@dataclass
class MultiScaleFeatures:
    """Encoder output triple: global vectors plus two local grids."""

    f_g: Tensor       # [B, nrkhs]
    f_s1: Tensor      # [B, nrkhs, s1, s1]
    f_s2: Tensor      # [B, nrkhs, s2, s2]

    def batch_size(self) -> int:
        return self.f_g.shape[0]


def _stage_extents(resolution: int, ndepth: int) -> tuple:
    """Spatial extent after the stem and after each block."""
    extents = []
    e = nc.conv_output_extent(resolution, 3, 2, 1)  # stem
    for i in range(1, ndepth + 1):
        if _block_downsamples(i, ndepth) :
            e = nc.conv_output_extent(e, 3, 2, 1)
        extents.append(e)
    return tuple(extents)


def _block_downsamples(block_index: int, ndepth: int) -> bool:
    return block_index % 2 == 0


def _place_local_heads(extents, scales) -> dict:
    """Map each local scale to a distinct block index (latest stage whose
    extent still covers the scale; larger scales step to earlier stages on
    collision)."""
    placement: dict = {}
    taken: set = set()
    for s in sorted(scales):
        candidates = [i for i, e in enumerate(extents) if e >= s and i not in taken]
        if not candidates:
            raise ConfigError(
                f"local scale {s} is unrealizable for stage extents {list(extents)}")
        idx = candidates[-1]
        placement[s] = idx
        taken.add(idx)
    return placement


class MultiScaleEncoder:
    """Parameterized encoder; owns named parameters and BN running buffers.

    ``training`` switches batch-norm between per-batch statistics (updating
    the running buffers) and frozen running statistics. In frozen mode the
    forward pass is a pure function of (weights, input).
    """

    def __init__(self, config: EncoderConfig, rng_seed: int, dtype=np.float32):
        config.validate()
        self.config = config
        self.seed = int(rng_seed)
        self.dtype = np.dtype(dtype)
        self.training = True
        self.extents = _stage_extents(config.input_resolution, config.ndepth)
        s1, s2 = config.local_scales
        self.placement = _place_local_heads(self.extents, (s1, s2))
        self.params: dict = {}
        self.buffers: dict = {}
        self._build(derive_rng(self.seed, INIT))

    # -- construction ---------------------------------------------------
    def _add_conv(self, name: str, cout: int, cin: int, k: int,
                  rng: np.random.Generator, gain: float = 2.0):
        std = np.sqrt(gain / (cin * k * k))
        w = rng.normal(0.0, std, (cout, cin, k, k)).astype(self.dtype)
        self.params[f"{name}.w"] = nc.parameter(w, name=f"{name}.w", dtype=self.dtype)

    def _add_bn(self, name: str, c: int):
        self.params[f"{name}.gamma"] = nc.parameter(np.ones(c, self.dtype), name=f"{name}.gamma",
                                                    dtype=self.dtype)
        self.params[f"{name}.beta"] = nc.parameter(np.zeros(c, self.dtype), name=f"{name}.beta",
                                                   dtype=self.dtype)
        self.buffers[f"{name}.running_mean"] = np.zeros(c, self.dtype)
        self.buffers[f"{name}.running_var"] = np.ones(c, self.dtype)

    def _build(self, rng: np.random.Generator):
        cfg = self.config
        self._add_conv("stem.conv", cfg.ndf, 3, 3, rng)
        self._add_bn("stem.bn", cfg.ndf)
        for i in range(1, cfg.ndepth + 1):
            b = f"block{i}"
            self._add_conv(f"{b}.conv1", cfg.ndf, cfg.ndf, 3, rng)
            self._add_bn(f"{b}.bn1", cfg.ndf)
            self._add_conv(f"{b}.conv2", cfg.ndf, cfg.ndf, 3, rng)
            self._add_bn(f"{b}.bn2", cfg.ndf)
            if _block_downsamples(i, cfg.ndepth):
                self._add_conv(f"{b}.skip", cfg.ndf, cfg.ndf, 1, rng, gain=1.0)
                self._add_bn(f"{b}.bnskip", cfg.ndf)
        for s in sorted(cfg.local_scales):
            self._add_conv(f"head_local{s}.conv", cfg.nrkhs, cfg.ndf, 1, rng, gain=1.0)
            self.params[f"head_local{s}.b"] = nc.parameter(
                np.zeros(cfg.nrkhs, self.dtype), name=f"head_local{s}.b", dtype=self.dtype)
        wg = rng.normal(0.0, np.sqrt(1.0 / cfg.ndf), (cfg.nrkhs, cfg.ndf)).astype(self.dtype)
        self.params["head_global.w"] = nc.parameter(wg, name="head_global.w", dtype=self.dtype)
        self.params["head_global.b"] = nc.parameter(
            np.zeros(cfg.nrkhs, self.dtype), name="head_global.b", dtype=self.dtype)

    # -- mode and bookkeeping --------------------------------------------
    def train_mode(self) -> "MultiScaleEncoder":
        self.training = True
        return self

    def eval_mode(self) -> "MultiScaleEncoder":
        self.training = False
        return self

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def state_arrays(self) -> dict:
        """Parameters then buffers, in stable construction order."""
        out = {name: p.data for name, p in self.params.items()}
        out.update(self.buffers)
        return out

    def meta_trainable(self) -> dict:
        """Conv/linear weights and biases only; BN affine stays frozen
        during episodic fine-tuning."""
        return {n: p for n, p in self.params.items()
                if not (n.endswith(".gamma") or n.endswith(".beta"))}

    def cast(self, dtype) -> "MultiScaleEncoder":
        """Clone with parameters/buffers cast to ``dtype`` (oracle re-runs)."""
        clone = MultiScaleEncoder(self.config, self.seed, dtype=dtype)
        clone.training = self.training
        for name, p in self.params.items():
            clone.params[name].data = p.data.astype(dtype)
        for name, b in self.buffers.items():
            clone.buffers[name] = b.astype(dtype)
        return clone

    # -- forward passes ---------------------------------------------------
    def _bn(self, name: str, x: Tensor, training: bool) -> Tensor:
        gamma = self.params[f"{name}.gamma"]
        beta = self.params[f"{name}.beta"]
        if training:
            y, mean, var = nc.batch_norm_train(x, gamma, beta, eps=_BN_EPS)
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * (n / max(n - 1, 1))
            rm = self.buffers[f"{name}.running_mean"]
            rv = self.buffers[f"{name}.running_var"]
            self.buffers[f"{name}.running_mean"] = (
                (1 - _BN_MOMENTUM) * rm + _BN_MOMENTUM * mean).astype(self.dtype)
            self.buffers[f"{name}.running_var"] = (
                (1 - _BN_MOMENTUM) * rv + _BN_MOMENTUM * unbiased).astype(self.dtype)
            return y
        return nc.batch_norm_eval(x, gamma.data, beta.data,
                                  self.buffers[f"{name}.running_mean"],
                                  self.buffers[f"{name}.running_var"], eps=_BN_EPS)

    def _block(self, i: int, x: Tensor, training: bool) -> Tensor:
        b = f"block{i}"
        stride = 2 if _block_downsamples(i, self.config.ndepth) else 1
        h = nc.conv2d(x, self.params[f"{b}.conv1.w"], stride=stride, pad=1)
        h = nc.relu(self._bn(f"{b}.bn1", h, training))
        h = nc.conv2d(h, self.params[f"{b}.conv2.w"], stride=1, pad=1)
        h = self._bn(f"{b}.bn2", h, training)
        if stride == 2:
            skip = nc.conv2d(x, self.params[f"{b}.skip.w"], stride=2, pad=0)
            skip = self._bn(f"{b}.bnskip", skip, training)
        else:
            skip = x
        return nc.relu(nc.add(h, skip))

    def _trunk(self, x: Tensor, training: bool) -> list:
        if x.data.ndim != 4 or x.shape[1] != 3:
            raise ContractViolation(f"encoder input must be [B, 3, R, R], got {x.shape}")
        h = nc.conv2d(x, self.params["stem.conv.w"], stride=2, pad=1)
        h = nc.relu(self._bn("stem.bn", h, training))
        stages = []
        for i in range(1, self.config.ndepth + 1):
            h = self._block(i, h, training)
            stages.append(h)
        return stages

    def _local_head(self, scale: int, stage: Tensor) -> Tensor:
        pooled = nc.adaptive_avg_pool2d(stage, scale)
        return nc.conv2d(pooled, self.params[f"head_local{scale}.conv.w"],
                         self.params[f"head_local{scale}.b"], stride=1, pad=0)

    def _global_head(self, top: Tensor) -> Tensor:
        pooled = nc.global_avg_pool(top)
        return nc.linear(pooled, self.params["head_global.w"], self.params["head_global.b"])

    def encode(self, batch) -> MultiScaleFeatures:
        """Full multi-scale forward at the configured input resolution."""
        x = nc.as_tensor(batch, dtype=self.dtype)
        if x.data.ndim != 4 or x.shape[2:] != (self.config.input_resolution,) * 2:
            raise ContractViolation(
                f"encode: expected [B, 3, {self.config.input_resolution}, "
                f"{self.config.input_resolution}], got {x.shape}")
        stages = self._trunk(x, self.training)
        s1, s2 = self.config.local_scales
        feats = MultiScaleFeatures(
            f_g=self._global_head(stages[-1]),
            f_s1=self._local_head(s1, stages[self.placement[s1]]),
            f_s2=self._local_head(s2, stages[self.placement[s2]]),
        )
        for part in (feats.f_g, feats.f_s1, feats.f_s2):
            if not np.all(np.isfinite(part.data)):
                raise ContractViolation("encode: non-finite features")
        return feats

    def global_embed(self, batch) -> Tensor:
        """Global head only; accepts any resolution the trunk can reduce."""
        x = nc.as_tensor(batch, dtype=self.dtype)
        stages = self._trunk(x, self.training)
        return self._global_head(stages[-1])

    def embed_images(self, batch: np.ndarray) -> np.ndarray:
        """Inference entry: frozen statistics, no tape, numpy in/out."""
        with nc.no_grad():
            saved = self.training
            self.training = False
            try:
                out = self.global_embed(np.asarray(batch, dtype=self.dtype))
            finally:
                self.training = saved
        return out.data

    # -- persistence ------------------------------------------------------
    def save(self, path) -> None:
        """Write weights in the binary checkpoint format plus a JSON sidecar
        describing the architecture, so the checkpoint is self-describing."""
        path = Path(path)
        nc.save_arrays(path, self.state_arrays())
        sidecar = {
            "ndf": self.config.ndf,
            "ndepth": self.config.ndepth,
            "nrkhs": self.config.nrkhs,
            "input_resolution": self.config.input_resolution,
            "local_scales": list(self.config.local_scales),
            "seed": self.seed,
        }
        Path(str(path) + ".json").write_text(json.dumps(sidecar, sort_keys=True, indent=1))


def build_encoder(config: EncoderConfig, rng_seed: int) -> MultiScaleEncoder:
    """Deterministic construction: same (config, seed) gives bit-identical
    parameters."""
    return MultiScaleEncoder(config, rng_seed)


def load_encoder(path) -> MultiScaleEncoder:
    """Rebuild an encoder from a checkpoint and its config sidecar."""
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.is_file():
        raise DataError(f"missing encoder config sidecar: {sidecar_path}")
    try:
        raw = json.loads(sidecar_path.read_text())
        config = EncoderConfig(ndf=int(raw["ndf"]), ndepth=int(raw["ndepth"]),
                               nrkhs=int(raw["nrkhs"]),
                               input_resolution=int(raw["input_resolution"]),
                               local_scales=tuple(raw["local_scales"]))
        seed = int(raw.get("seed", 0))
    except (KeyError, ValueError, json.JSONDecodeError) as exc:
        raise DataError(f"bad encoder sidecar {sidecar_path}: {exc}") from exc
    enc = MultiScaleEncoder(config, seed)
    arrays = nc.load_arrays(path)
    expected = set(enc.params) | set(enc.buffers)
    if set(arrays) != expected:
        missing = sorted(expected - set(arrays))
        extra = sorted(set(arrays) - expected)
        raise DataError(f"checkpoint {path} does not match architecture "
                        f"(missing {missing}, unexpected {extra})")
    for name, arr in arrays.items():
        if name in enc.params:
            if arr.shape != enc.params[name].shape:
                raise DataError(f"checkpoint {path}: shape of {name!r} is {arr.shape}, "
                                f"expected {enc.params[name].shape}")
            enc.params[name].data = arr.astype(enc.dtype)
        else:
            enc.buffers[name] = arr.astype(enc.dtype)
    return enc
