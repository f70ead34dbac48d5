"""Episodic meta-learning: task sampling, prototypes, the distance-softmax
classifier, and the fine-tuning loop.

An episode is one K-way C-shot task. Class prototypes are the means of
the support embeddings; a query is classified by a softmax over negated
distances to the prototypes, and the meta loss is the negative
log-likelihood of the true class under that posterior.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numcore as nc
from .data import ImageDataset, Normalization, batch_from_records
from .encoder import MultiScaleEncoder
from .errors import ContractViolation, NumericDomainError, ProtocolError
from .numcore import Tensor
from .seeds import META_EPISODE, derive_rng


@dataclass
class Episode:
    """Support/query item lists as (record, episode-local class index)."""

    support: list
    query: list
    way: int
    shot: int
    queries_per_class: int
    class_map: dict   # episode-local index -> dataset class name

    def batches(self, resolution: int, normalization: Normalization):
        """Materialize ((support_x, support_y), (query_x, query_y)) arrays."""
        sx = batch_from_records([r for r, _ in self.support], resolution, normalization)
        qx = batch_from_records([r for r, _ in self.query], resolution, normalization)
        sy = np.array([y for _, y in self.support], dtype=np.int64)
        qy = np.array([y for _, y in self.query], dtype=np.int64)
        return (sx, sy), (qx, qy)


@dataclass
class PrototypeSet:
    """Per-class centroids of the support embeddings."""

    prototypes: Tensor   # [K, nrkhs]
    class_map: dict

    @property
    def way(self) -> int:
        return self.prototypes.shape[0]


def sample_episode(dataset: ImageDataset, way: int, shot: int, queries: int,
                   rng: np.random.Generator) -> Episode:
    """Draw one K-way C-shot task: classes uniformly without replacement,
    then support/query items uniformly without replacement within class."""
    if way < 2:
        raise ProtocolError(f"episodes need way >= 2, got {way}")
    if shot < 1 or queries < 1:
        raise ProtocolError(f"episodes need shot >= 1 and queries >= 1, "
                            f"got shot={shot} queries={queries}")
    if dataset.num_classes < way:
        raise ProtocolError(
            f"dataset has {dataset.num_classes} classes, protocol needs {way}")
    need = shot + queries
    short = {c: len(dataset.index[c]) for c in dataset.class_names
             if len(dataset.index[c]) < need}
    if short:
        raise ProtocolError(
            f"protocol needs {need} samples per class (shot {shot} + queries {queries}); "
            f"too small: {short}")
    class_ids = rng.choice(dataset.num_classes, size=way, replace=False)
    support, query = [], []
    class_map = {}
    for local, cid in enumerate(class_ids):
        cname = dataset.class_names[int(cid)]
        class_map[local] = cname
        records = dataset.index[cname]
        picks = rng.choice(len(records), size=need, replace=False)
        support.extend((records[int(j)], local) for j in picks[:shot])
        query.extend((records[int(j)], local) for j in picks[shot:])
    return Episode(support=support, query=query, way=way, shot=shot,
                   queries_per_class=queries, class_map=class_map)


def _one_hot(labels: np.ndarray, way: int, dtype) -> np.ndarray:
    oh = np.zeros((labels.size, way), dtype=dtype)
    oh[np.arange(labels.size), labels] = 1
    return oh


def compute_prototypes(support_embeddings, labels, class_map: dict | None = None) -> PrototypeSet:
    """Exact per-class means of the support embeddings (differentiable)."""
    emb = nc.as_tensor(support_embeddings)
    labels = np.asarray(labels, dtype=np.int64)
    if emb.data.ndim != 2 or labels.shape != (emb.shape[0],):
        raise ContractViolation(
            f"compute_prototypes: embeddings {emb.shape} vs labels {labels.shape}")
    way = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=way)
    if way < 1 or np.any(counts == 0):
        raise ContractViolation(f"compute_prototypes: empty class in labels "
                                f"(counts {counts.tolist()})")
    assign = _one_hot(labels, way, emb.dtype).T / counts[:, None].astype(emb.dtype)
    protos = nc.matmul(nc.as_tensor(assign), emb)
    return PrototypeSet(prototypes=protos,
                        class_map=class_map or {k: str(k) for k in range(way)})


def _distances(query_embeddings: Tensor, prototypes: PrototypeSet,
               squared: bool = True) -> Tensor:
    d = nc.squared_euclidean_pairwise(query_embeddings, prototypes.prototypes)
    if not squared:
        d = nc.exp(nc.scale(nc.log(nc.add_scalar(d, 1e-24)), 0.5))
    return d


def classify_query(query_embedding, prototypes: PrototypeSet,
                   squared: bool = True) -> np.ndarray:
    """Posterior over the episode's classes: softmax of negated distances.

    Accepts one embedding [D] or a batch [n, D]; returns matching [K] or
    [n, K] probabilities summing to 1.
    """
    q = nc.as_tensor(query_embedding)
    single = q.data.ndim == 1
    if single:
        q = nc.reshape(q, (1, q.shape[0]))
    if q.data.ndim != 2 or q.shape[1] != prototypes.prototypes.shape[1]:
        raise ContractViolation(
            f"classify_query: embedding {q.shape} vs prototypes "
            f"{prototypes.prototypes.shape}")
    if not np.all(np.isfinite(q.data)):
        raise NumericDomainError("classify_query: non-finite embedding")
    with nc.no_grad():
        d = _distances(q, prototypes, squared)
        probs = nc.softmax(nc.neg(d), axis=1).data
    return probs[0] if single else probs


def meta_loss(query_embeddings, query_labels, prototypes: PrototypeSet,
              squared: bool = True) -> Tensor:
    """Mean negative log-posterior of the true classes; equivalently, mean
    of d(q, c_y) + log sum_k exp(-d(q, c_k)). Differentiable into the
    embeddings on both the query and support side."""
    q = nc.as_tensor(query_embeddings)
    labels = np.asarray(query_labels, dtype=np.int64)
    way = prototypes.way
    if q.data.ndim != 2 or labels.shape != (q.shape[0],):
        raise ContractViolation(f"meta_loss: embeddings {q.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= way):
        raise ContractViolation(
            f"meta_loss: labels must lie in [0, {way}), got range "
            f"[{labels.min()}, {labels.max()}]")
    d = _distances(q, prototypes, squared)
    logits = nc.neg(d)
    lse = nc.log_sum_exp(logits, axis=1)
    picked = nc.tsum(nc.mul(logits, nc.as_tensor(_one_hot(labels, way, q.dtype))), axis=1)
    return nc.tmean(nc.add(lse, nc.neg(picked)))


@dataclass(frozen=True)
class MetaTrainConfig:
    way: int = 5
    shot: int = 1
    queries: int = 15
    episodes: int = 500
    lr: float = 1e-4
    seed: int = 0
    resolution: int = 32
    squared_distance: bool = True


def meta_train(encoder: MultiScaleEncoder, dataset: ImageDataset,
               config: MetaTrainConfig, checkpoint_path=None, log_path=None):
    """Episodic fine-tuning of a (typically pretrained) encoder.

    Batch-norm statistics stay frozen (inference mode); only conv/linear
    weights receive updates. Returns ``(encoder, log)`` with log rows
    ``(episode, loss, accuracy)``.
    """
    if config.episodes < 1:
        raise ContractViolation(f"meta_train: episodes must be >= 1, got {config.episodes}")
    encoder.eval_mode()   # frozen batch statistics; weights still trainable
    trainable = encoder.meta_trainable()
    state = nc.AdamState(lr=config.lr)
    log = []
    for ep in range(config.episodes):
        rng = derive_rng(config.seed, META_EPISODE, ep)
        episode = sample_episode(dataset, config.way, config.shot, config.queries, rng)
        (sx, sy), (qx, qy) = episode.batches(config.resolution, dataset.normalization)
        emb = encoder.global_embed(np.concatenate([sx, qx]))
        ns = sx.shape[0]
        sup = _rows(emb, 0, ns)
        qry = _rows(emb, ns, emb.shape[0])
        protos = compute_prototypes(sup, sy, episode.class_map)
        loss = meta_loss(qry, qy, protos, squared=config.squared_distance)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericDomainError(
                f"meta_train: non-finite loss at episode seed ({config.seed}, {ep})")
        probs = classify_query(qry.data, protos, squared=config.squared_distance)
        acc = float(np.mean(probs.argmax(axis=1) == qy))
        grads = nc.backward(loss, trainable.values())
        nc.adam_step(trainable, {n: p.grad for n, p in trainable.items()}, state)
        log.append((ep, value, acc))
    if checkpoint_path is not None:
        encoder.save(checkpoint_path)
    if log_path is not None:
        write_episode_log(log_path, log)
    return encoder, log


def _rows(x: Tensor, lo: int, hi: int) -> Tensor:
    """Differentiable row slice of a 2-d tensor."""
    n, d = x.shape
    sel = np.zeros((hi - lo, n), dtype=x.dtype)
    sel[np.arange(hi - lo), np.arange(lo, hi)] = 1
    return nc.matmul(nc.as_tensor(sel), x)


def write_episode_log(path, log) -> None:
    lines = ["episode,loss,accuracy"]
    lines += [f"{ep},{loss!r},{acc!r}" for ep, loss, acc in log]
    Path(path).write_text("\n".join(lines) + "\n")
