"""Episodes, prototypes, the distance-softmax classifier, and a short
episodic fine-tuning run.

Run:  python3 demos/04_episodic_meta_learning.py
"""

import numpy as np

from protofew.data import synth_dataset, synth_split
from protofew.encoder import EncoderConfig, build_encoder
from protofew.meta import (MetaTrainConfig, classify_query, compute_prototypes,
                           meta_loss, meta_train, sample_episode)
from protofew.seeds import derive_rng

ds = synth_dataset(num_classes=12, per_class=30, resolution=32, seed=5)
split = synth_split(ds, 8, 2, 2)
train = ds.subset(split.train)

# --- one episode ------------------------------------------------------------
episode = sample_episode(train, way=5, shot=3, queries=4, rng=derive_rng(0, 1))
print("episode:", episode.way, "way x", episode.shot, "shot,",
      len(episode.query), "queries")
print("class map:", episode.class_map)

# --- prototypes and the posterior on made-up embeddings ----------------------
emb = np.random.default_rng(3).normal(0, 1, (15, 8))
labels = np.repeat(np.arange(5), 3)
protos = compute_prototypes(emb, labels, episode.class_map)
print("prototypes:", protos.prototypes.shape)

query = emb[4] + 0.05  # near class 1's support
probs = classify_query(query, protos)
print("posterior:", np.round(probs, 3), "-> class", probs.argmax())
print("loss at that query:",
      round(meta_loss(query[None, :], np.array([1]), protos).item(), 4))

# --- episodic fine-tuning ----------------------------------------------------
encoder = build_encoder(EncoderConfig(ndf=16, ndepth=2, nrkhs=32,
                                      input_resolution=32, local_scales=(3, 5)), 11)
_, log = meta_train(encoder, train,
                    MetaTrainConfig(way=5, shot=1, queries=5, episodes=60,
                                    lr=5e-4, seed=2))
first = np.mean([acc for _, _, acc in log[:20]])
last = np.mean([acc for _, _, acc in log[-20:]])
print(f"episode accuracy: first-20 {first:.2f} -> last-20 {last:.2f}")
print("(training episodes pull same-class embeddings toward shared prototypes)")
