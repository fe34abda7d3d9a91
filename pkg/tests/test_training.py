import math
from math import comb

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from memgcn.data import SynthSpec, generate_synthetic_cohort
from memgcn.errors import NumericalError, ValidationError
from memgcn.graph import build_spatial_graph
from memgcn.model import MLPBaseline, RawEdges
from memgcn.training import (
    Adam, TrainConfig, baseline_forward, build_model, enumerate_pairs, evaluate_pairs, fold_pairs, kfold_split,
    load_checkpoint, read_tensors, save_checkpoint, split_validation, train,
)

TINY = dict(r=3, f_out=4, d=4, t=4, hops=2, h_head=8, knn=3, folds=3, batch_size=16)


def test_pair_count_examples():
    pairs = enumerate_pairs(["case"] * 596 + ["control"] * 158)
    assert pairs.counts() == (283_881, 189_713, 94_168)
    one = enumerate_pairs(["case", "case"])
    assert (len(one), int(one.label[0])) == (1, 1)
    assert enumerate_pairs([1, 1, 1, 0, 0]).counts() == (10, 4, 6)
    with pytest.raises(ValidationError):
        enumerate_pairs([1])


@given(st.integers(0, 40), st.integers(0, 40))
def test_pair_count_identities(m1, m2):
    if m1 + m2 < 2:
        return
    total, match, non = enumerate_pairs([1] * m1 + [0] * m2).counts()
    assert total == comb(m1 + m2, 2)
    assert match == comb(m1, 2) + comb(m2, 2)
    assert non == m1 * m2


def test_kfold_examples():
    fold = kfold_split(10, 5, seed=0)
    assert np.array_equal(np.bincount(fold), [2] * 5)
    assert np.array_equal(kfold_split(10, 5, 7), kfold_split(10, 5, 7))
    assert sorted(np.bincount(kfold_split(754, 5, 1))) == [150, 151, 151, 151, 151]
    with pytest.raises(ValidationError):
        kfold_split(3, 4, 0)


@given(st.integers(2, 60), st.integers(2, 6), st.integers(0, 1000))
def test_no_leakage(m, k, seed):
    if k > m:
        return
    groups = np.random.default_rng(seed).integers(0, 2, size=m)
    pairs = enumerate_pairs(groups)
    fold_of = kfold_split(m, k, seed)
    for f in range(k):
        tr, te = fold_pairs(pairs, fold_of, f)
        train_acq = set(tr.a) | set(tr.b)
        test_acq = set(te.a) | set(te.b)
        assert not train_acq & test_acq
        sub, val = split_validation(tr, fold_of, f, 0.2, seed)
        assert not (set(sub.a) | set(sub.b)) & (set(val.a) | set(val.b))


def test_adam_zero_gradient_and_first_step():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    opt = Adam(lr=0.1)
    opt.step(p, {"w": np.zeros(3)})
    np.testing.assert_array_equal(p["w"], [1.0, -2.0, 3.0])
    opt = Adam(lr=0.1)
    g = np.array([0.5, -3.0, 1e-3])
    opt.step(p, {"w": g})
    np.testing.assert_allclose(p["w"], np.array([1.0, -2.0, 3.0]) - 0.1 * np.sign(g), atol=1e-6)


def test_adam_hand_iteration():
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    p = {"p": np.array([1.0])}
    opt = Adam(lr=lr)
    x, m, v = 1.0, 0.0, 0.0
    for step in range(1, 4):
        g = 2.0 * x
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        x = x - lr * (m / (1 - b1**step)) / (math.sqrt(v / (1 - b2**step)) + eps)
        opt.step(p, {"p": 2.0 * p["p"]})
    assert abs(p["p"][0] - x) <= 1e-12


def test_adam_rejects_non_finite():
    with pytest.raises(NumericalError, match="theta_1"):
        Adam().step({"theta_1": np.ones(2)}, {"theta_1": np.array([1.0, np.nan])})


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=10))
def test_adam_stays_finite(gs):
    p = {"w": np.zeros(len(gs))}
    opt = Adam()
    for _ in range(3):
        opt.step(p, {"w": np.array(gs)})
    assert np.all(np.isfinite(p["w"]))


@pytest.fixture(scope="module")
def tiny_cohort():
    cohort = generate_synthetic_cohort(SynthSpec(n_roi=8, n_case=9, n_control=9, t=4, D=10, seed=0))
    graph = build_spatial_graph(cohort.coords, k=3)
    return cohort, graph


def run(cohort, graph, **overrides):
    config = TrainConfig(**{**TINY, "epochs": 3, **overrides})
    pairs = enumerate_pairs(cohort.labels())
    fold_of = kfold_split(len(cohort), config.folds, config.seed)
    return train(config, graph, cohort, pairs, 0, fold_of)


def test_zero_epochs_returns_initial_model(tiny_cohort):
    cohort, graph = tiny_cohort
    model, history = run(cohort, graph, epochs=0)
    fresh = build_model(TrainConfig(**TINY), graph, cohort.n, cohort.D)
    assert history.epochs == [] and history.initial is not None
    for k in fresh.params:
        assert np.array_equal(model.params[k], fresh.params[k])


def test_training_reduces_loss_and_is_deterministic(tiny_cohort):
    cohort, graph = tiny_cohort
    m1, h1 = run(cohort, graph, epochs=8, learning_rate=1e-2)
    m2, h2 = run(cohort, graph, epochs=8, learning_rate=1e-2)
    assert h1.epochs[-1].train_loss < h1.initial.train_loss
    assert h1 == h2
    for k in m1.params:
        assert np.array_equal(m1.params[k], m2.params[k])


def test_threads_give_same_result(tiny_cohort):
    cohort, graph = tiny_cohort
    _, h1 = run(cohort, graph)
    _, h2 = run(cohort, graph, threads=3)
    for a, b in zip(h1.epochs, h2.epochs):
        assert a.train_loss == pytest.approx(b.train_loss, rel=1e-10)


@pytest.mark.parametrize("kind", ["gcn", "raw_edges", "mlp"])
def test_other_model_kinds_train(tiny_cohort, kind):
    cohort, graph = tiny_cohort
    model, history = run(cohort, graph, model=kind, mlp_hidden=16, matching="bilinear")
    assert len(history.epochs) == 3
    pairs = enumerate_pairs(cohort.labels())
    _, test = fold_pairs(pairs, kfold_split(len(cohort), 3, 0), 0)
    loss, acc, auc, _ = evaluate_pairs(model, cohort.arrays(), test)
    assert np.isfinite(loss) and 0 <= acc <= 1 and 0 <= auc <= 1
    if kind == "gcn":
        assert not model.params["A"].any() and not model.params["B"].any()


def test_baseline_examples(rng):
    model = RawEdges(5, rng=rng)
    x = rng.uniform(size=(5, 5))
    Y, _ = model.embed(np.stack([x, x]), None, None)
    _, sims, _ = model.pair_probs(Y[:1], Y[1:])
    np.testing.assert_allclose(sims, 1.0)
    mlp = MLPBaseline(4, d=3, hidden=(8, 6), rng=rng)
    for k in mlp.params:
        mlp.params[k] = np.zeros_like(mlp.params[k])
    np.testing.assert_allclose(baseline_forward("mlp", mlp, x[:4, :4], x[:4, :4]), [0.5, 0.5])
    with pytest.raises(ValidationError):
        baseline_forward("memgcn", mlp, x, x)


def test_checkpoint_roundtrip(tiny_cohort, tmp_path):
    cohort, graph = tiny_cohort
    config = TrainConfig(**{**TINY, "matching": "bilinear", "tie_h": True})
    model = build_model(config, graph, cohort.n, cohort.D)
    save_checkpoint(tmp_path / "ck", model, config, {"fold": 2})
    loaded, cfg, meta = load_checkpoint(tmp_path / "ck", graph, cohort.n, cohort.D)
    assert cfg == config and meta["fold"] == 2
    for k, v in model.params.items():
        assert np.array_equal(loaded.params[k], v)
    (tmp_path / "bad.bin").write_bytes(b"XXXX" + bytes(8))
    with pytest.raises(ValidationError):
        read_tensors(tmp_path / "bad")


def test_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(model="transformer")
    with pytest.raises(ValidationError):
        TrainConfig(hops=0)
