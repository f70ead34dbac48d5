"""Episodic evaluation: accuracy with confidence intervals, the frozen
nearest-centroid ablation, the supervised-pretraining baseline, and the
cross-domain protocol.

Episodes are independent; per-episode seeds derive from (master seed,
episode index), so reports are invariant to worker count and re-runs are
byte-identical.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import numcore as nc
from .data import ImageDataset
from .encoder import EncoderConfig, MultiScaleEncoder, build_encoder
from .errors import ContractViolation, DataError, NumericDomainError, ProtocolError
from .meta import classify_query, compute_prototypes, sample_episode
from .seeds import EVAL_EPISODE, SUPERVISED_BATCH, PRETRAIN_SHUFFLE, derive_rng

THREADS_ENV = "PROTOFEW_THREADS"


@dataclass(frozen=True)
class Protocol:
    """One evaluation setting: K-way C-shot with a fixed episode budget."""

    way: int = 5
    shot: int = 5
    queries: int = 15
    episodes: int = 600
    seed: int = 0
    resolution: int = 32

    def __post_init__(self):
        if self.way < 2:
            raise ProtocolError(f"protocol needs way >= 2, got {self.way}")
        if self.episodes < 1:
            raise ProtocolError(f"protocol needs episodes >= 1, got {self.episodes}")

    @property
    def label(self) -> str:
        return f"{self.way}-way {self.shot}-shot"


@dataclass
class EvalReport:
    """Aggregate accuracy plus everything needed to recompute it."""

    mean_accuracy: float
    ci95_halfwidth: float
    episodes: int
    protocol: Protocol
    seed: int
    dataset_id: str = ""
    checkpoint_id: str = ""
    tag: str = ""                     # "" for standard eval, "no-meta" for the ablation
    per_episode: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def formatted(self) -> str:
        return format_mean_ci(self.mean_accuracy, self.ci95_halfwidth)


def ci95_halfwidth(per_episode: np.ndarray) -> float:
    """1.96 * sample std / sqrt(n); zero for a single episode."""
    per_episode = np.asarray(per_episode, dtype=np.float64)
    n = per_episode.size
    if n < 2:
        return 0.0
    return float(1.96 * per_episode.std(ddof=1) / np.sqrt(n))


def _workers(workers: int | None) -> int:
    if workers is None:
        workers = int(os.environ.get(THREADS_ENV, "1") or 1)
    return max(1, workers)


class _EmbeddingCache:
    """Per-image embeddings of a frozen encoder, computed once up front.

    Evaluation never updates parameters, so embedding each test image a
    single time (in fixed-size chunks, before any worker starts) yields
    the same numbers as re-embedding per episode while keeping reports
    independent of worker count.
    """

    def __init__(self, encoder, dataset: ImageDataset, resolution: int,
                 chunk: int = 256):
        from .data import batch_from_records

        records = dataset.all_records()
        self.row_of = {id(rec): i for i, rec in enumerate(records)}
        parts = []
        for lo in range(0, len(records), chunk):
            batch = batch_from_records(records[lo:lo + chunk], resolution,
                                       dataset.normalization)
            parts.append(encoder.embed_images(batch))
        self.embeddings = np.concatenate(parts, axis=0)
        if not np.all(np.isfinite(self.embeddings)):
            raise NumericDomainError("evaluate: non-finite embeddings")

    def rows(self, items) -> np.ndarray:
        return self.embeddings[[self.row_of[id(rec)] for rec, _ in items]]


def _episode_accuracy(encoder, cache: _EmbeddingCache | None, dataset: ImageDataset,
                      protocol: Protocol, index: int, hook: Callable | None) -> float:
    rng = derive_rng(protocol.seed, EVAL_EPISODE, index)
    episode = sample_episode(dataset, protocol.way, protocol.shot, protocol.queries, rng)
    if cache is not None:
        sup = cache.rows(episode.support)
        qry = cache.rows(episode.query)
        sy = np.array([y for _, y in episode.support], dtype=np.int64)
        qy = np.array([y for _, y in episode.query], dtype=np.int64)
    else:
        (sx, sy), (qx, qy) = episode.batches(protocol.resolution, dataset.normalization)
        emb = encoder.embed_images(np.concatenate([sx, qx]))
        if not np.all(np.isfinite(emb)):
            raise NumericDomainError(f"evaluate: non-finite embeddings at episode {index}")
        sup, qry = emb[: sx.shape[0]], emb[sx.shape[0]:]
    protos = compute_prototypes(sup, sy, episode.class_map)
    if hook is not None:
        probs = hook(sup, sy, qry, protos)
    else:
        probs = classify_query(qry, protos)
    return float(np.mean(probs.argmax(axis=1) == qy))


def evaluate(encoder, dataset: ImageDataset, protocol: Protocol,
             workers: int | None = None, tag: str = "",
             dataset_id: str = "", checkpoint_id: str = "",
             transduction_hook: Callable | None = None,
             cache_embeddings: bool = True) -> EvalReport:
    """Run the episodic protocol and aggregate accuracy.

    No parameter updates occur. The encoder is frozen, so each image is
    embedded once up front by default; ``cache_embeddings=False`` re-embeds
    per episode (needed for stub encoders whose output is call-dependent).
    ``transduction_hook`` is the plug-in point for query-set-aware inference
    strategies; the default is standard inductive nearest-prototype
    classification.
    """
    # fail fast on infeasible protocols before embedding anything
    rng_probe = derive_rng(protocol.seed, EVAL_EPISODE, 0)
    sample_episode(dataset, protocol.way, protocol.shot, protocol.queries, rng_probe)

    cache = _EmbeddingCache(encoder, dataset, protocol.resolution) if cache_embeddings \
        else None
    nworkers = _workers(workers)
    indices = range(protocol.episodes)
    if nworkers == 1:
        accs = [_episode_accuracy(encoder, cache, dataset, protocol, i, transduction_hook)
                for i in indices]
    else:
        with ThreadPoolExecutor(max_workers=nworkers) as pool:
            accs = list(pool.map(
                lambda i: _episode_accuracy(encoder, cache, dataset, protocol, i,
                                            transduction_hook), indices))
    per_episode = np.asarray(accs, dtype=np.float64)
    return EvalReport(
        mean_accuracy=float(per_episode.mean()),
        ci95_halfwidth=ci95_halfwidth(per_episode),
        episodes=protocol.episodes,
        protocol=protocol,
        seed=protocol.seed,
        dataset_id=dataset_id or dataset.root,
        checkpoint_id=checkpoint_id,
        tag=tag,
        per_episode=per_episode,
    )


def evaluate_frozen_nn(encoder, dataset: ImageDataset, protocol: Protocol,
                       workers: int | None = None, dataset_id: str = "",
                       checkpoint_id: str = "") -> EvalReport:
    """Nearest-class-mean evaluation of a pretraining-only encoder.

    Mechanically identical to ``evaluate``; the ablation differs only in
    which checkpoint is supplied, and the report is tagged "no-meta".
    """
    return evaluate(encoder, dataset, protocol, workers=workers, tag="no-meta",
                    dataset_id=dataset_id, checkpoint_id=checkpoint_id)


# ---------------------------------------------------------------------------
# supervised baseline
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SupervisedTrainConfig:
    epochs: int = 15
    batch_size: int = 32
    lr: float = 2e-4
    seed: int = 0
    resolution: int = 32


def supervised_baseline(dataset: ImageDataset, encoder_config: EncoderConfig,
                        config: SupervisedTrainConfig) -> MultiScaleEncoder:
    """Train an encoder with a linear head and cross-entropy on class labels,
    then discard the head. The result plugs into any evaluation protocol."""
    from .data import batch_from_records  # local import to avoid cycle noise

    encoder = build_encoder(encoder_config, config.seed)
    encoder.train_mode()
    num_classes = dataset.num_classes
    rng_head = derive_rng(config.seed, SUPERVISED_BATCH)
    w = nc.parameter(rng_head.normal(
        0, np.sqrt(1.0 / encoder_config.nrkhs),
        (num_classes, encoder_config.nrkhs)).astype(np.float32), name="sl_head.w")
    b = nc.parameter(np.zeros(num_classes, np.float32), name="sl_head.b")
    params = dict(encoder.params)
    params["sl_head.w"] = w
    params["sl_head.b"] = b

    labeled = dataset.labeled_records()
    images = batch_from_records([r for r, _ in labeled], config.resolution,
                                dataset.normalization)
    labels = np.array([y for _, y in labeled], dtype=np.int64)
    state = nc.AdamState(lr=config.lr)
    for epoch in range(config.epochs):
        order = derive_rng(config.seed, PRETRAIN_SHUFFLE, epoch).permutation(len(labeled))
        for lo in range(0, len(labeled), config.batch_size):
            idx = order[lo:lo + config.batch_size]
            if idx.size < 2:
                continue
            feats = encoder.global_embed(images[idx])
            logits = nc.linear(feats, w, b)
            y = labels[idx]
            lse = nc.log_sum_exp(logits, axis=1)
            onehot = np.zeros((idx.size, num_classes), dtype=logits.dtype)
            onehot[np.arange(idx.size), y] = 1
            picked = nc.tsum(nc.mul(logits, nc.as_tensor(onehot)), axis=1)
            loss = nc.tmean(nc.add(lse, nc.neg(picked)))
            if not np.isfinite(loss.item()):
                raise NumericDomainError(
                    f"supervised_baseline: non-finite loss at ({config.seed}, {epoch}, {lo})")
            nc.backward(loss, params.values())
            nc.adam_step(params, {n: p.grad for n, p in params.items()}, state)
    return encoder


def training_accuracy(encoder: MultiScaleEncoder, dataset: ImageDataset,
                      resolution: int = 32) -> float:
    """Nearest-class-mean accuracy on the training split (diagnostic)."""
    from .data import batch_from_records

    labeled = dataset.labeled_records()
    images = batch_from_records([r for r, _ in labeled], resolution,
                                dataset.normalization)
    labels = np.array([y for _, y in labeled], dtype=np.int64)
    emb = encoder.embed_images(images)
    protos = compute_prototypes(emb, labels)
    probs = classify_query(emb, protos)
    return float(np.mean(probs.argmax(axis=1) == labels))


# ---------------------------------------------------------------------------
# cross-domain protocol
# ---------------------------------------------------------------------------

@dataclass
class CrossDomainReport:
    cells: list                      # EvalReport per (dataset, protocol)
    grand_mean: float                # headline average over all cells

    def by_dataset(self) -> dict:
        out: dict = {}
        for rep in self.cells:
            out.setdefault(rep.dataset_id, []).append(rep)
        return out


def cross_domain_evaluate(encoder, target_datasets: Mapping[str, ImageDataset],
                          protocols: Sequence[Protocol],
                          workers: int | None = None,
                          checkpoint_id: str = "") -> CrossDomainReport:
    """Evaluate one source-trained encoder on every (target dataset,
    protocol) cell and average the cell means into a single headline number."""
    if not target_datasets:
        raise DataError("cross_domain_evaluate: no target datasets given")
    if not protocols:
        raise ContractViolation("cross_domain_evaluate: no protocols given")
    cells = []
    for name, dataset in target_datasets.items():
        for proto in protocols:
            cells.append(evaluate(encoder, dataset, proto, workers=workers,
                                  dataset_id=name, checkpoint_id=checkpoint_id))
    grand = float(np.mean([rep.mean_accuracy for rep in cells]))
    return CrossDomainReport(cells=cells, grand_mean=grand)


# ---------------------------------------------------------------------------
# report emitters
# ---------------------------------------------------------------------------

def format_mean_ci(mean: float, ci: float) -> str:
    """Accuracy presentation: (0.6403, 0.0020) -> '64.03 ± 0.20%'."""
    return f"{mean * 100:.2f} ± {ci * 100:.2f}%"


def write_episode_csv(path, report: EvalReport) -> None:
    lines = ["episode_index,accuracy"]
    lines += [f"{i},{float(a)!r}" for i, a in enumerate(report.per_episode)]
    Path(path).write_text("\n".join(lines) + "\n")


SUMMARY_HEADER = ["dataset", "protocol", "mean", "ci95", "episodes", "seed", "checkpoint"]


def write_summary_csv(path, reports: Sequence[EvalReport]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_HEADER)
        for rep in reports:
            label = rep.protocol.label + (f" [{rep.tag}]" if rep.tag else "")
            writer.writerow([rep.dataset_id, label, repr(rep.mean_accuracy),
                             repr(rep.ci95_halfwidth), rep.episodes, rep.seed,
                             rep.checkpoint_id])


def read_summary_csv(path) -> list:
    path = Path(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise DataError(f"summary {path}: {exc}") from exc
    if not rows or rows[0] != SUMMARY_HEADER:
        raise DataError(f"summary {path}: bad header {rows[0] if rows else '(empty)'}")
    out = []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(SUMMARY_HEADER):
            raise DataError(f"summary {path}:{lineno}: expected "
                            f"{len(SUMMARY_HEADER)} columns, got {len(row)}")
        out.append({
            "dataset": row[0], "protocol": row[1], "mean": float(row[2]),
            "ci95": float(row[3]), "episodes": int(row[4]), "seed": int(row[5]),
            "checkpoint": row[6],
        })
    return out


def markdown_table(rows: Mapping[str, Mapping[str, tuple]],
                   columns: Sequence[str] | None = None) -> str:
    """Method-by-protocol accuracy table, missing cells rendered as em-dash.

    ``rows`` maps row label -> {column label -> (mean, ci)}. Column order is
    the sorted union of column labels unless given explicitly, so output does
    not depend on insertion order.
    """
    if columns is None:
        seen = {c for cells in rows.values() for c in cells}
        columns = sorted(seen, key=_protocol_sort_key)
    lines = ["| Method | " + " | ".join(columns) + " |",
             "|---" * (len(columns) + 1) + "|"]
    for name, cells in rows.items():
        rendered = [format_mean_ci(*cells[c]) if c in cells else "—" for c in columns]
        lines.append("| " + " | ".join([name, *rendered]) + " |")
    return "\n".join(lines) + "\n"


def _protocol_sort_key(label: str):
    way = shot = 0
    parts = label.split()
    for part in parts:
        if part.endswith("-way"):
            way = int(part.split("-")[0])
        elif part.endswith("-shot"):
            shot = int(part.split("-")[0])
    return (way, shot, label)
