"""Acceptance suite.

Each criterion prints one PASS/FAIL line (run with ``pytest -s`` to see
them) and pins its tolerance inline. The empirical criteria (5, 6) share
one trained pipeline via a module-scoped fixture.
"""

import math
import time

import numpy as np
import pytest
from scipy.stats import chi2

from conftest import gradcheck_op
from protofew import numcore as nc
from protofew.data import synth_dataset, synth_split
from protofew.encoder import EncoderConfig, MultiScaleFeatures, build_encoder, load_encoder
from protofew.evaluation import (Protocol, SupervisedTrainConfig, evaluate,
                                 evaluate_frozen_nn, format_mean_ci,
                                 supervised_baseline)
from protofew.meta import (MetaTrainConfig, classify_query, compute_prototypes,
                           meta_loss, meta_train, sample_episode)
from protofew.seeds import derive_rng
from protofew.ssl import (DiscreteJoint, PretrainConfig, amdim_loss, nce_loss,
                          pretrain, verify_infonce_bound)

DESK = EncoderConfig()   # ndf=32, ndepth=4, nrkhs=64, resolution=32, scales (5, 7)


def _report(criterion: str, passed: bool, detail: str = ""):
    status = "PASS" if passed else "FAIL"
    print(f"[{criterion}] {status} {detail}".rstrip())
    assert passed, f"{criterion}: {detail}"


# ===========================================================================
# criterion 1: gradient correctness (<= 1e-4 relative, double precision,
# >= 20 seeds, runtime <= 2 min)
# ===========================================================================

def _composed_loss_check(seed: int) -> float:
    """Sampled-coordinate finite differences through the full encoder for
    the two composed losses; returns the worst relative error."""
    rng = np.random.default_rng(seed)
    enc = build_encoder(DESK, seed).cast(np.float64)
    enc.train_mode()
    imgs_a = rng.normal(0, 1, (2, 3, 32, 32))
    imgs_b = rng.normal(0, 1, (2, 3, 32, 32))

    def amdim_of():
        return amdim_loss(enc.encode(imgs_a), enc.encode(imgs_b))

    enc2 = build_encoder(DESK, seed + 1000).cast(np.float64)
    enc2.eval_mode()
    sup_x = rng.normal(0, 1, (4, 3, 32, 32))
    qry_x = rng.normal(0, 1, (4, 3, 32, 32))
    sy = np.array([0, 0, 1, 1])
    qy = np.array([0, 1, 0, 1])

    def meta_of():
        emb_s = enc2.global_embed(sup_x)
        emb_q = enc2.global_embed(qry_x)
        protos = compute_prototypes(emb_s, sy)
        return meta_loss(emb_q, qy, protos)

    worst = 0.0
    for enc_i, loss_fn, names in (
            (enc, amdim_of, ["stem.conv.w", "block2.conv1.w", "head_local5.conv.w",
                             "head_global.w"]),
            (enc2, meta_of, ["stem.conv.w", "block3.conv2.w", "head_global.w"])):
        params = [enc_i.params[n] for n in names]
        nc.backward(loss_fn(), params)
        analytic = {n: p.grad.copy() for n, p in zip(names, params)}
        for name, p in zip(names, params):
            flat = p.data.reshape(-1)
            coords = rng.choice(flat.size, size=3, replace=False)
            for c in coords:
                a = analytic[name].reshape(-1)[c]
                # central differences at several steps: a relu kink inside
                # one interval pollutes that step only, so take the best
                errors = []
                for step in (1e-5, 1e-6, 3e-7):
                    orig = flat[c]
                    flat[c] = orig + step
                    hi = loss_fn().item()
                    flat[c] = orig - step
                    lo = loss_fn().item()
                    flat[c] = orig
                    numeric = (hi - lo) / (2 * step)
                    if max(abs(a), abs(numeric)) > 1e-8:
                        errors.append(abs(a - numeric) / max(abs(a), abs(numeric)))
                    else:
                        errors.append(0.0)
                worst = max(worst, min(errors))
    return worst


def test_criterion_1_gradient_correctness():
    start = time.perf_counter()
    worst_op = 0.0
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        x = rng.normal(0, 1, (3, 4))
        x_pos = rng.uniform(0.5, 2.0, (3, 4))
        x_off = np.where(np.abs(x) < 0.1, x + 0.3, x)
        checks = [
            (nc.matmul, [rng.normal(0, 1, (3, 4)), rng.normal(0, 1, (4, 2))]),
            (nc.linear, [rng.normal(0, 1, (3, 4)), rng.normal(0, 1, (5, 4)),
                         rng.normal(0, 1, (5,))]),
            (lambda a, b: nc.conv2d(a, b, stride=2, pad=1),
             [rng.normal(0, 1, (1, 2, 6, 6)), rng.normal(0, 1, (3, 2, 3, 3))]),
            (nc.relu, [x_off]),
            (nc.tanh, [x]),
            (nc.exp, [x]),
            (nc.log, [x_pos]),
            (nc.global_avg_pool, [rng.normal(0, 1, (2, 2, 4, 4))]),
            (lambda a: nc.adaptive_avg_pool2d(a, 3), [rng.normal(0, 1, (1, 2, 5, 5))]),
            (nc.add, [x, rng.normal(0, 1, (3, 4))]),
            (lambda a: nc.scale(a, 1.3), [x]),
            (lambda a, b: nc.mul(a, b), [x, rng.normal(0, 1, (3, 4))]),
            (lambda a: nc.softmax(a, axis=1), [x]),
            (lambda a: nc.log_sum_exp(a, axis=1), [x]),
            (nc.squared_euclidean_pairwise,
             [rng.normal(0, 1, (3, 4)), rng.normal(0, 1, (2, 4))]),
            (nc.dot_product_pairwise,
             [rng.normal(0, 1, (3, 4)), rng.normal(0, 1, (2, 4))]),
            (lambda a: nc.l2_normalize(a, axis=1), [x]),
            (nc.position_dot_scores,
             [rng.normal(0, 1, (2, 3, 4)), rng.normal(0, 1, (2, 3, 4))]),
            (nc.global_local_scores,
             [rng.normal(0, 1, (2, 3)), rng.normal(0, 1, (2, 3, 4))]),
            (lambda a, g, b: nc.batch_norm_train(a, g, b)[0],
             [rng.normal(0, 1, (3, 2, 4, 4)), rng.normal(1, 0.2, (2,)),
              rng.normal(0, 0.2, (2,))]),
        ]
        for fn, arrays in checks:
            worst_op = max(worst_op, gradcheck_op(fn, arrays, tol=1e-4))

    worst_composed = max(_composed_loss_check(seed) for seed in range(20))
    elapsed = time.perf_counter() - start
    _report("criterion 1 gradient-correctness",
            worst_op <= 1e-4 and worst_composed <= 1e-4 and elapsed <= 120,
            f"worst per-op {worst_op:.2e}, worst composed {worst_composed:.2e}, "
            f"{elapsed:.0f}s")


# ===========================================================================
# criterion 2: equation oracles (1e-6, >= 100 randomized trials each, <= 1 min)
# ===========================================================================

def test_criterion_2_equation_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(42)
    worst = {"prototypes": 0.0, "classify": 0.0, "meta": 0.0, "nce": 0.0, "amdim": 0.0}

    for _ in range(100):
        k = int(rng.integers(2, 6))
        c = int(rng.integers(1, 6))
        d = int(rng.integers(2, 9))
        nq = int(rng.integers(1, 7))
        emb = rng.normal(0, 1, (k * c, d))
        labels = np.repeat(np.arange(k), c)
        protos = compute_prototypes(emb, labels)
        ref = np.stack([emb[labels == kk].mean(axis=0) for kk in range(k)])
        worst["prototypes"] = max(worst["prototypes"],
                                  float(np.abs(protos.prototypes.data - ref).max()))

        q = rng.normal(0, 1, (nq, d))
        probs = classify_query(q, protos)
        dmat = np.array([[math.fsum((qi - ck) ** 2 for qi, ck in zip(qrow, crow))
                          for crow in ref] for qrow in q])
        e = np.exp(-dmat - (-dmat).max(axis=1, keepdims=True))
        ref_probs = e / e.sum(axis=1, keepdims=True)
        worst["classify"] = max(worst["classify"], float(np.abs(probs - ref_probs).max()))

        qy = rng.integers(0, k, nq)
        loss = meta_loss(q, qy, protos).item()
        ref_loss = float(-np.mean(np.log(ref_probs[np.arange(nq), qy])))
        worst["meta"] = max(worst["meta"], abs(loss - ref_loss))

    for _ in range(100):
        b = int(rng.integers(2, 9))
        table = rng.normal(0, 2, (b, b))
        loss = nce_loss(table).item()
        ref = np.mean([
            -np.log(np.exp(table[i, i]) / np.sum(np.exp(table[i])))
            for i in range(b)
        ])
        worst["nce"] = max(worst["nce"], abs(loss - ref))

    from test_ssl_losses import oracle_amdim_direction
    for _ in range(100):
        b = int(rng.integers(2, 9))
        d = 6
        fa = MultiScaleFeatures(f_g=nc.as_tensor(rng.normal(0, 1, (b, d))),
                                f_s1=nc.as_tensor(rng.normal(0, 1, (b, d, 2, 2))),
                                f_s2=nc.as_tensor(rng.normal(0, 1, (b, d, 3, 3))))
        fb = MultiScaleFeatures(f_g=nc.as_tensor(rng.normal(0, 1, (b, d))),
                                f_s1=nc.as_tensor(rng.normal(0, 1, (b, d, 2, 2))),
                                f_s2=nc.as_tensor(rng.normal(0, 1, (b, d, 3, 3))))
        ref = 0.5 * (sum(oracle_amdim_direction(fa, fb, 20.0))
                     + sum(oracle_amdim_direction(fb, fa, 20.0)))
        worst["amdim"] = max(worst["amdim"], abs(amdim_loss(fa, fb).item() - ref))

    elapsed = time.perf_counter() - start
    ok = all(v <= 1e-6 for v in worst.values()) and elapsed <= 60
    _report("criterion 2 equation-oracles", ok,
            ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f", {elapsed:.0f}s")


# ===========================================================================
# criterion 3: InfoNCE bound vs exact MI (10 joints x batch {2,4,8,16},
# 1e4 batches each, <= 3 min)
# ===========================================================================

def _fsum_mi(p):
    px = p.sum(axis=1)
    py = p.sum(axis=0)
    return math.fsum(p[i, j] * math.log(p[i, j] / (px[i] * py[j]))
                     for i in range(p.shape[0]) for j in range(p.shape[1])
                     if p[i, j] > 0)


def test_criterion_3_infonce_bound():
    start = time.perf_counter()
    rng = np.random.default_rng(7)
    joints = [DiscreteJoint(np.eye(4) / 4),
              DiscreteJoint(np.eye(8) / 8),
              DiscreteJoint(np.outer([0.2, 0.8], [0.4, 0.6]))]
    while len(joints) < 10:
        m, n = rng.integers(2, 7, 2)
        p = rng.uniform(0.02, 1.0, (int(m), int(n)))
        if len(joints) % 2:
            p[rng.integers(0, m), rng.integers(0, n)] = 0.0
        joints.append(DiscreteJoint(p / p.sum()))

    failures = []
    for ji, joint in enumerate(joints):
        exact = _fsum_mi(joint.p)
        for batch_size in (2, 4, 8, 16):
            rep = verify_infonce_bound(joint, batch_size, num_batches=10_000,
                                       rng=derive_rng(99, ji, batch_size))
            assert abs(rep.mi - exact) < 1e-12
            if not rep.mean_bound <= exact + 3 * rep.stderr:
                failures.append((ji, batch_size, rep.mean_bound, exact))
    elapsed = time.perf_counter() - start
    _report("criterion 3 infonce-bound", not failures and elapsed <= 180,
            f"{len(joints)} joints x 4 batch sizes, {elapsed:.0f}s"
            + (f", failures: {failures}" if failures else ""))


# ===========================================================================
# criterion 4: protocol correctness
# ===========================================================================

def test_criterion_4_protocol_correctness():
    ds = synth_dataset(num_classes=20, per_class=12, resolution=8, seed=31)
    # 1e5 draws: disjointness and exact counts
    violations = 0
    counts = np.zeros(20)
    name_to_idx = {c: i for i, c in enumerate(ds.class_names)}
    for i in range(100_000):
        ep = sample_episode(ds, 5, 1, 2, derive_rng(17, i))
        sup = {r.key for r, _ in ep.support}
        qry = {r.key for r, _ in ep.query}
        if len(sup) != 5 or len(qry) != 10 or (sup & qry):
            violations += 1
        if i < 10_000:
            for cname in ep.class_map.values():
                counts[name_to_idx[cname]] += 1
    expected = 10_000 * 5 / 20
    stat = float(((counts - expected) ** 2 / expected).sum())
    threshold = float(chi2.ppf(0.99, df=19))

    # binomial null for random embeddings
    class FreshRandomStub:
        def __init__(self, seed):
            self.rng = np.random.default_rng(seed)

        def embed_images(self, batch):
            return self.rng.normal(0, 1, (batch.shape[0], 16)).astype(np.float32)

    eval_ds = synth_dataset(num_classes=6, per_class=24, resolution=8, seed=77)
    null_ok = {}
    for way in (2, 5):
        proto = Protocol(way=way, shot=1, queries=10, episodes=600, seed=way,
                         resolution=8)
        rep = evaluate(FreshRandomStub(seed=way), eval_ds, proto, workers=1,
                       cache_embeddings=False)
        p = 1 / way
        sigma = math.sqrt(p * (1 - p) / (proto.episodes * way * proto.queries))
        null_ok[way] = abs(rep.mean_accuracy - p) <= 3 * sigma

    ok = violations == 0 and stat < threshold and all(null_ok.values())
    _report("criterion 4 protocol-correctness", ok,
            f"violations={violations}, chi2={stat:.1f} (<{threshold:.1f}), "
            f"null 2-way={null_ok[2]}, 5-way={null_ok[5]}")


# ===========================================================================
# criteria 5 and 6: ablation and cross-domain directions (shared pipeline)
# ===========================================================================

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    t0 = time.perf_counter()
    root = tmp_path_factory.mktemp("pipeline")
    ds = synth_dataset(num_classes=20, per_class=60, resolution=32, seed=1234)
    split = synth_split(ds, 13, 2, 5)
    train, test = ds.subset(split.train), ds.subset(split.test)
    proto = Protocol(way=5, shot=5, queries=15, episodes=600, seed=0)

    random_enc = build_encoder(DESK, 7)
    rep_random = evaluate_frozen_nn(random_enc, test, proto)

    ssl_enc = build_encoder(DESK, 7)
    _, curve = pretrain(train, ssl_enc, PretrainConfig(epochs=8, batch_size=32, seed=7),
                        checkpoint_path=root / "ssl.pft")
    rep_ssl_frozen = evaluate_frozen_nn(ssl_enc, test, proto)

    meta_train(ssl_enc, train, MetaTrainConfig(way=5, shot=1, queries=10,
                                               episodes=300, lr=1e-4, seed=3))
    rep_ssl_meta = evaluate(ssl_enc, test, proto)

    sl_enc = supervised_baseline(train, DESK,
                                 SupervisedTrainConfig(epochs=10, batch_size=32, seed=7))
    meta_train(sl_enc, train, MetaTrainConfig(way=5, shot=1, queries=10,
                                              episodes=300, lr=1e-4, seed=3))
    rep_sl_meta = evaluate(sl_enc, test, proto)

    # cross-domain target: same generator family, different palette and seed
    ssl_only = load_encoder(root / "ssl.pft")
    dsB = synth_dataset(num_classes=20, per_class=60, resolution=32, seed=4321,
                        palette="B")
    testB = dsB.subset(synth_split(dsB, 13, 2, 5).test)
    rep_cd_ssl = evaluate_frozen_nn(ssl_only, testB, proto)
    rep_cd_random = evaluate_frozen_nn(random_enc, testB, proto)

    return {
        "curve": curve,
        "random": rep_random,
        "ssl_frozen": rep_ssl_frozen,
        "ssl_meta": rep_ssl_meta,
        "sl_meta": rep_sl_meta,
        "cd_ssl": rep_cd_ssl,
        "cd_random": rep_cd_random,
        "elapsed": time.perf_counter() - t0,
    }


def test_criterion_5_ablation_direction(pipeline):
    rnd, ssl_f = pipeline["random"], pipeline["ssl_frozen"]
    ssl_m, sl_m = pipeline["ssl_meta"], pipeline["sl_meta"]
    gain_a = (ssl_f.mean_accuracy - rnd.mean_accuracy) * 100
    gain_b = (ssl_m.mean_accuracy - ssl_f.mean_accuracy) * 100
    delta_c = (ssl_m.mean_accuracy - sl_m.mean_accuracy) * 100
    print(f"  random frozen    : {rnd.formatted()}")
    print(f"  ssl frozen       : {ssl_f.formatted()}  (+{gain_a:.2f} vs random)")
    print(f"  ssl + meta       : {ssl_m.formatted()}  (+{gain_b:.2f} vs ssl frozen)")
    print(f"  supervised + meta: {sl_m.formatted()}  (ssl-sl delta {delta_c:+.2f}, "
          f"recorded, not forced)")
    ok = (gain_a >= 10.0 and gain_b >= 5.0
          and pipeline["elapsed"] <= 900)
    _report("criterion 5 ablation-direction", ok,
            f"(a) +{gain_a:.2f} >= 10, (b) +{gain_b:.2f} >= 5, "
            f"(c) recorded {delta_c:+.2f}, pipeline {pipeline['elapsed']:.0f}s")


def test_pretrain_loss_decrease_contract(pipeline):
    """Training-loop post-condition: mean loss falls by >= 20% from the first
    to the final epoch on the desk dataset."""
    first, last = pipeline["curve"][0][1], pipeline["curve"][-1][1]
    _report("pretrain loss-decrease", last <= 0.8 * first,
            f"{first:.3f} -> {last:.3f} ({100 * (1 - last / first):.1f}%)")


def test_criterion_6_cross_domain_direction(pipeline):
    ssl, rnd = pipeline["cd_ssl"], pipeline["cd_random"]
    gain = (ssl.mean_accuracy - rnd.mean_accuracy) * 100
    print(f"  domain-B ssl     : {ssl.formatted()}")
    print(f"  domain-B random  : {rnd.formatted()}")
    _report("criterion 6 cross-domain-direction", gain >= 5.0,
            f"+{gain:.2f} >= 5 at 5-way 5-shot, 600 episodes")


# ===========================================================================
# criterion 7: reproducibility through the CLI
# ===========================================================================

def test_criterion_7_reproducibility(tmp_path):
    from protofew.cli import main

    args = ["--data", "synth", "--resolution", "16", "--seed", "5",
            "--ndf", "8", "--ndepth", "2", "--nrkhs", "16", "--local-scales", "3,5"]
    outs = []
    for name in ("r1", "r2"):
        out = tmp_path / name
        assert main(["pretrain", *args, "--epochs", "1", "--batch-size", "16",
                     "--out", str(out)]) == 0
        outs.append(out)
    ck_same = (outs[0] / "encoder.pft").read_bytes() == (outs[1] / "encoder.pft").read_bytes()

    def strip_wall(path):
        return ["," .join(line.split(",")[:2])
                for line in (path / "loss.csv").read_text().splitlines()]

    loss_same = strip_wall(outs[0]) == strip_wall(outs[1])

    eval_args = ["--data", "synth", "--resolution", "16", "--seed", "5",
                 "--checkpoint", str(outs[0] / "encoder.pft"),
                 "--episodes", "20", "--way", "3", "--shot", "1", "--queries", "4"]
    evals = []
    for name, workers in (("e1", "1"), ("e2", "1"), ("e3", "4")):
        out = tmp_path / name
        assert main(["eval", *eval_args, "--workers", workers, "--out", str(out)]) == 0
        evals.append((out / "summary.csv").read_bytes()
                     + (out / "episodes.csv").read_bytes())
    eval_same = evals[0] == evals[1]
    worker_same = evals[0] == evals[2]

    ok = ck_same and loss_same and eval_same and worker_same
    _report("criterion 7 reproducibility", ok,
            f"checkpoints={ck_same}, losses={loss_same}, evals={eval_same}, "
            f"workers={worker_same}")


# ===========================================================================
# criterion 8: formatting fidelity
# ===========================================================================

def test_criterion_8_formatting_fidelity():
    cases = {
        (0.6403, 0.0020): "64.03 ± 0.20%",
        (0.8115, 0.0014): "81.15 ± 0.14%",
        (1.0, 0.0): "100.00 ± 0.00%",
        (0.4613, 0.0017): "46.13 ± 0.17%",
    }
    bad = {args: format_mean_ci(*args) for args, want in cases.items()
           if format_mean_ci(*args) != want}
    _report("criterion 8 formatting-fidelity", not bad,
            f"bad renderings: {bad}" if bad else "all table conventions match")
