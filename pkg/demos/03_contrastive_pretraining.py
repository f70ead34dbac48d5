"""Two-view contrastive pretraining on the synthetic dataset, scaled down
to finish in about a minute.

Run:  python3 demos/03_contrastive_pretraining.py
"""

import numpy as np

from protofew import numcore as nc
from protofew.data import synth_dataset, synth_split
from protofew.encoder import EncoderConfig, build_encoder
from protofew.ssl import (AugmentConfig, PretrainConfig, amdim_loss, augment_pair,
                          nce_loss, pretrain, score_pairs)
from protofew.seeds import derive_rng

# --- the loss on its own ----------------------------------------------------
# Score tables put the matched pair on the diagonal; the NCE loss is
# softmax-cross-entropy against those positives.
rng = np.random.default_rng(0)
feats_a = rng.normal(0, 1, (4, 16))
print("nce of a random self-pair:",
      round(nce_loss(score_pairs(feats_a, feats_a)).item(), 4),
      "(< ln 4 =", round(np.log(4), 4), "because self-scores dominate)")
print("nce of a constant table:", nce_loss(np.zeros((4, 4))).item(),
      "= ln 4 (no signal)")

# --- augmentation -----------------------------------------------------------
ds = synth_dataset(num_classes=8, per_class=24, resolution=32, seed=99)
batch = np.stack([r.load().transpose(2, 0, 1) for r in ds.all_records()[:6]])
pair = augment_pair(batch, derive_rng(1, 2), AugmentConfig())
print("view pair shapes:", pair.x_a.shape, pair.x_b.shape,
      "| identical views?", np.array_equal(pair.x_a, pair.x_b))

# --- a short pretraining run ------------------------------------------------
split = synth_split(ds, 6, 1, 1)
train = ds.subset(split.train)
encoder = build_encoder(EncoderConfig(ndf=16, ndepth=2, nrkhs=32,
                                      input_resolution=32, local_scales=(3, 5)), 7)
_, curve = pretrain(train, encoder,
                    PretrainConfig(epochs=4, batch_size=24, seed=7))
print("loss curve (epoch, mean loss):")
for epoch, loss, _ in curve:
    print(f"  {epoch}: {loss:.3f}")
print("the curve should fall: views of the same image move together,")
print("views of different images move apart")
