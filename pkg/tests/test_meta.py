"""Episode sampling, prototypes, the distance-softmax posterior, meta loss."""

import numpy as np
import pytest
from scipy.stats import chi2

from protofew import numcore as nc
from protofew.data import synth_dataset
from protofew.errors import ContractViolation, ProtocolError
from protofew.meta import (Episode, MetaTrainConfig, PrototypeSet, classify_query,
                           compute_prototypes, meta_loss, meta_train, sample_episode)
from protofew.seeds import derive_rng


@pytest.fixture(scope="module")
def toy():
    return synth_dataset(num_classes=8, per_class=10, resolution=16, seed=21)


class TestSampleEpisode:
    def test_exhaustion_uses_every_sample_once(self, toy):
        ep = sample_episode(toy, way=8, shot=4, queries=6, rng=derive_rng(1, 0))
        keys = [r.key for r, _ in ep.support] + [r.key for r, _ in ep.query]
        assert len(keys) == len(set(keys)) == 80

    def test_fixed_seed_identical(self, toy):
        e1 = sample_episode(toy, 5, 2, 3, derive_rng(9, 9))
        e2 = sample_episode(toy, 5, 2, 3, derive_rng(9, 9))
        assert [r.key for r, _ in e1.support] == [r.key for r, _ in e2.support]
        assert [r.key for r, _ in e1.query] == [r.key for r, _ in e2.query]
        assert e1.class_map == e2.class_map

    def test_counts_and_disjointness(self, toy):
        ep = sample_episode(toy, 4, 2, 3, derive_rng(3, 1))
        assert len(ep.support) == 8 and len(ep.query) == 12
        sup_keys = {r.key for r, _ in ep.support}
        qry_keys = {r.key for r, _ in ep.query}
        assert sup_keys.isdisjoint(qry_keys)
        for label in range(4):
            assert sum(1 for _, y in ep.support if y == label) == 2
            assert sum(1 for _, y in ep.query if y == label) == 3

    def test_insufficient_classes_named(self, toy):
        with pytest.raises(ProtocolError, match="8 classes"):
            sample_episode(toy, 9, 1, 1, derive_rng(0, 0))

    def test_insufficient_samples_named(self, toy):
        with pytest.raises(ProtocolError, match="11 samples"):
            sample_episode(toy, 3, 5, 6, derive_rng(0, 0))

    def test_one_way_rejected(self, toy):
        with pytest.raises(ProtocolError, match="way"):
            sample_episode(toy, 1, 1, 1, derive_rng(0, 0))

    def test_class_selection_uniform_chi_square(self):
        ds = synth_dataset(num_classes=20, per_class=4, resolution=8, seed=4)
        counts = np.zeros(20)
        name_to_idx = {c: i for i, c in enumerate(ds.class_names)}
        episodes = 4000
        for i in range(episodes):
            ep = sample_episode(ds, 5, 1, 1, derive_rng(13, i))
            for cname in ep.class_map.values():
                counts[name_to_idx[cname]] += 1
        expected = episodes * 5 / 20
        stat = float(((counts - expected) ** 2 / expected).sum())
        assert stat < chi2.ppf(0.99, df=19), f"chi-square {stat:.1f}"


class TestComputePrototypes:
    def test_one_shot_prototype_is_the_embedding(self, rng):
        emb = rng.normal(0, 1, (3, 5))
        ps = compute_prototypes(emb, np.array([0, 1, 2]))
        np.testing.assert_array_equal(ps.prototypes.data, emb)

    def test_two_point_mean(self):
        ps = compute_prototypes(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([0, 0]))
        np.testing.assert_array_equal(ps.prototypes.data, [[0.5, 0.5]])

    def test_matches_loop_and_average_oracle(self, rng):
        k, c, d = 5, 5, 7
        labels = np.repeat(np.arange(k), c)
        emb = rng.normal(0, 1, (k * c, d))
        ps = compute_prototypes(emb, labels)
        for kk in range(k):
            ref = emb[labels == kk].mean(axis=0)
            np.testing.assert_allclose(ps.prototypes.data[kk], ref, atol=1e-7)

    def test_exact_mean_invariant(self, rng):
        labels = np.repeat(np.arange(4), 5)
        emb = rng.normal(0, 1, (20, 6))
        ps = compute_prototypes(emb, labels)
        for kk in range(4):
            dev = np.abs(ps.prototypes.data[kk] - emb[labels == kk].mean(axis=0)).max()
            assert dev <= 1e-6

    def test_scaling_linearity(self, rng):
        labels = np.array([0, 0, 1, 1])
        emb = rng.normal(0, 1, (4, 3))
        p1 = compute_prototypes(emb, labels).prototypes.data
        # power-of-two scaling is exact in floating point
        p2 = compute_prototypes(4.0 * emb, labels).prototypes.data
        np.testing.assert_array_equal(p2, 4.0 * p1)
        p3 = compute_prototypes(3.0 * emb, labels).prototypes.data
        np.testing.assert_allclose(p3, 3.0 * p1, rtol=1e-12)

    def test_empty_class_rejected(self, rng):
        with pytest.raises(ContractViolation, match="empty class"):
            compute_prototypes(rng.normal(0, 1, (3, 4)), np.array([0, 0, 2]))


class TestClassifyQuery:
    def test_equidistant_fifty_fifty(self):
        ps = compute_prototypes(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([0, 1]))
        probs = classify_query(np.array([0.0, 5.0]), ps)
        np.testing.assert_allclose(probs, [0.5, 0.5], atol=1e-12)

    def test_saturation_at_own_prototype(self):
        protos = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        ps = compute_prototypes(protos, np.array([0, 1, 2]))
        probs = classify_query(np.array([0.0, 0.0]), ps)
        assert probs[0] > 0.9999

    def test_distance_one_two_example(self):
        c = 1.0 + np.sqrt(2.0)
        ps = PrototypeSet(nc.as_tensor(np.array([[0.0], [c]])), {0: "a", 1: "b"})
        probs = classify_query(np.array([1.0]), ps)  # squared distances (1, 2)
        expect = np.array([1.0, np.exp(-1.0)]) / (1.0 + np.exp(-1.0))
        np.testing.assert_allclose(probs, expect, atol=1e-12)

    def test_sums_to_one_and_batch_shape(self, rng):
        ps = compute_prototypes(rng.normal(0, 1, (4, 6)), np.arange(4))
        probs = classify_query(rng.normal(0, 1, (10, 6)), ps)
        assert probs.shape == (10, 4)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)

    def test_argmax_is_nearest_prototype(self, rng):
        protos = rng.normal(0, 1, (5, 4))
        ps = compute_prototypes(protos, np.arange(5))
        q = rng.normal(0, 1, (20, 4))
        probs = classify_query(q, ps)
        d = ((q[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
        np.testing.assert_array_equal(probs.argmax(axis=1), d.argmin(axis=1))

    def test_translation_invariance(self, rng):
        protos = rng.normal(0, 1, (4, 6))
        q = rng.normal(0, 1, (7, 6))
        shift = rng.normal(0, 1, (6,))
        p1 = classify_query(q, compute_prototypes(protos, np.arange(4)))
        p2 = classify_query(q + shift, compute_prototypes(protos + shift, np.arange(4)))
        np.testing.assert_allclose(p1, p2, atol=1e-9)

    def test_nonfinite_embedding_rejected(self, rng):
        ps = compute_prototypes(rng.normal(0, 1, (2, 3)), np.arange(2))
        from protofew.errors import NumericDomainError
        with pytest.raises(NumericDomainError):
            classify_query(np.array([np.nan, 0.0, 0.0]), ps)


class TestMetaLoss:
    def test_zero_at_own_prototype_with_far_others(self):
        protos = np.array([[0.0, 0.0], [50.0, 0.0]])
        ps = compute_prototypes(protos, np.array([0, 1]))
        loss = meta_loss(np.array([[0.0, 0.0]]), np.array([0]), ps)
        assert loss.item() < 1e-9

    def test_equidistant_two_way_gives_ln2(self):
        ps = compute_prototypes(np.array([[1.0, 0.0], [-1.0, 0.0]]), np.array([0, 1]))
        loss = meta_loss(np.array([[0.0, 2.0]]), np.array([0]), ps)
        assert abs(loss.item() - np.log(2)) < 1e-12

    def test_composition_identity_with_classify_query(self, rng):
        k, d, n = 5, 6, 25
        ps = compute_prototypes(rng.normal(0, 1, (k, d)), np.arange(k))
        q = rng.normal(0, 1, (n, d))
        y = rng.integers(0, k, n)
        loss = meta_loss(q, y, ps).item()
        probs = classify_query(q, ps)
        ref = float(-np.mean(np.log(probs[np.arange(n), y])))
        assert abs(loss - ref) < 1e-7

    def test_label_out_of_range_rejected(self, rng):
        ps = compute_prototypes(rng.normal(0, 1, (3, 4)), np.arange(3))
        with pytest.raises(ContractViolation, match="labels"):
            meta_loss(rng.normal(0, 1, (2, 4)), np.array([0, 3]), ps)

    def test_differentiable_into_embeddings(self, rng):
        sup = nc.parameter(rng.normal(0, 1, (6, 4)), dtype=np.float64)
        qry = nc.parameter(rng.normal(0, 1, (4, 4)), dtype=np.float64)
        ps = compute_prototypes(sup, np.repeat(np.arange(3), 2))
        loss = meta_loss(qry, np.array([0, 1, 2, 0]), ps)
        nc.backward(loss)
        assert np.any(sup.grad != 0) and np.any(qry.grad != 0)

    def test_gradient_matches_finite_differences(self, rng):
        sup_base = rng.normal(0, 1, (6, 4))
        labels = np.repeat(np.arange(3), 2)
        qry = rng.normal(0, 1, (5, 4))
        qy = np.array([0, 1, 2, 0, 1])

        def loss_of(sup_t):
            ps = compute_prototypes(sup_t, labels)
            return meta_loss(nc.as_tensor(qry), qy, ps)

        sup = nc.parameter(sup_base, dtype=np.float64)
        nc.backward(loss_of(sup))
        numeric = nc.finite_diff_gradient(loss_of, nc.as_tensor(sup_base))
        assert nc.relative_error(sup.grad, numeric) <= 1e-4


@pytest.fixture(scope="module")
def tiny_setup():
    ds = synth_dataset(num_classes=8, per_class=12, resolution=16, seed=21)
    from protofew.encoder import EncoderConfig, build_encoder
    cfg = EncoderConfig(ndf=8, ndepth=2, nrkhs=16, input_resolution=16,
                        local_scales=(2, 3))
    return ds, cfg, build_encoder


class TestMetaTrain:

    def test_zero_lr_keeps_parameters_and_buffers(self, tiny_setup):
        ds, cfg, build = tiny_setup
        enc = build(cfg, 3)
        params_before = {n: p.data.copy() for n, p in enc.params.items()}
        buffers_before = {n: b.copy() for n, b in enc.buffers.items()}
        meta_train(enc, ds, MetaTrainConfig(way=3, shot=1, queries=2, episodes=4,
                                            lr=0.0, seed=1, resolution=16))
        for n, p in enc.params.items():
            np.testing.assert_array_equal(p.data, params_before[n], err_msg=n)
        for n, b in enc.buffers.items():
            np.testing.assert_array_equal(b, buffers_before[n], err_msg=n)

    def test_fixed_seed_identical_log(self, tiny_setup):
        ds, cfg, build = tiny_setup
        logs = []
        for _ in range(2):
            enc = build(cfg, 3)
            _, log = meta_train(enc, ds, MetaTrainConfig(way=3, shot=1, queries=2,
                                                         episodes=5, lr=1e-3, seed=4,
                                                         resolution=16))
            logs.append(log)
        assert logs[0] == logs[1]

    def test_bn_affine_frozen_conv_weights_move(self, tiny_setup):
        ds, cfg, build = tiny_setup
        enc = build(cfg, 5)
        gamma_before = enc.params["stem.bn.gamma"].data.copy()
        conv_before = enc.params["stem.conv.w"].data.copy()
        meta_train(enc, ds, MetaTrainConfig(way=3, shot=1, queries=2, episodes=5,
                                            lr=1e-3, seed=2, resolution=16))
        np.testing.assert_array_equal(enc.params["stem.bn.gamma"].data, gamma_before)
        assert not np.array_equal(enc.params["stem.conv.w"].data, conv_before)

    def test_accuracy_improves_over_500_episodes(self):
        """Desk-scale run: last-100 episode accuracy beats first-100 by >= 10
        points (5-way 1-shot, from-scratch encoder)."""
        from protofew.encoder import EncoderConfig, build_encoder
        from protofew.data import synth_split
        ds = synth_dataset(num_classes=20, per_class=60, resolution=32, seed=1234)
        train = ds.subset(synth_split(ds, 13, 2, 5).train)
        enc = build_encoder(EncoderConfig(), 42)
        _, log = meta_train(enc, train,
                            MetaTrainConfig(way=5, shot=1, queries=15, episodes=500,
                                            lr=1e-4, seed=6, resolution=32))
        first = float(np.mean([acc for _, _, acc in log[:100]]))
        last = float(np.mean([acc for _, _, acc in log[-100:]]))
        assert last - first >= 0.10, f"{first:.3f} -> {last:.3f}"
