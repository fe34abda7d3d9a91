import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from memgcn.errors import ValidationError
from memgcn.matching import (
    HeadParams, bilinear_matching, classify_head, cross_entropy, head_backward, head_forward, inner_matching,
    match_backward, match_forward, pair_loss,
)
from memgcn.numerics import grad_check


def test_inner_examples(rng):
    y = rng.normal(size=(5, 3))
    np.testing.assert_allclose(inner_matching(y, y), 1.0, atol=1e-15)
    a = np.array([[1.0, 0.0], [0.0, 2.0]])
    b = np.array([[0.0, 3.0], [-1.0, 0.0]])
    np.testing.assert_array_equal(inner_matching(a, b), [0.0, 0.0])
    yA, yB = rng.normal(size=(2, 6, 4))
    a_hat = yA / np.linalg.norm(yA, axis=1, keepdims=True)
    b_hat = yB / np.linalg.norm(yB, axis=1, keepdims=True)
    np.testing.assert_allclose(inner_matching(yA, yB), 1 - np.sum((a_hat - b_hat) ** 2, axis=1) / 2, atol=1e-10)
    with pytest.raises(ValidationError):
        inner_matching(yA, yB[:5])


def test_zero_rows_give_zero_similarity(rng):
    y = rng.normal(size=(3, 2))
    z = y.copy()
    z[1] = 0.0
    assert inner_matching(y, z)[1] == 0.0


def test_bilinear_examples(rng):
    yA, yB = rng.normal(size=(2, 5, 3))
    assert np.array_equal(np.diag(bilinear_matching(yA, yB, np.eye(3))), inner_matching(yA, yB))
    assert not bilinear_matching(yA, yB, np.zeros((3, 3))).any()
    M = rng.normal(size=(3, 3))
    a_hat = yA / np.linalg.norm(yA, axis=1, keepdims=True)
    b_hat = yB / np.linalg.norm(yB, axis=1, keepdims=True)
    np.testing.assert_allclose(bilinear_matching(yA, yB, M), a_hat @ M @ b_hat.T, atol=1e-12)
    with pytest.raises(ValidationError):
        bilinear_matching(yA, yB, np.eye(4))


@given(st.integers(0, 10_000), st.floats(1e-3, 1e3))
def test_symmetry_and_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    yA, yB = rng.normal(size=(2, 6, 4))
    M = rng.normal(size=(4, 4))
    np.testing.assert_allclose(inner_matching(yA, yB), inner_matching(yB, yA), atol=1e-12)
    np.testing.assert_allclose(bilinear_matching(yA, yB, M), bilinear_matching(yB, yA, M.T).T, atol=1e-12)
    np.testing.assert_allclose(inner_matching(c * yA, yB), inner_matching(yA, yB), atol=1e-10)


@given(st.integers(0, 10_000))
def test_identity_reduction_exact(seed):
    yA, yB = np.random.default_rng(seed).normal(size=(2, 3, 7, 5))
    sims, _ = match_forward("bilinear", yA, yB, np.eye(5))
    inner, _ = match_forward("inner", yA, yB)
    assert np.array_equal(np.diagonal(sims, axis1=-2, axis2=-1), inner)


@pytest.mark.parametrize("kind", ["inner", "bilinear"])
def test_match_backward(kind, rng):
    yA, yB = rng.normal(size=(2, 3, 5, 4))
    M = rng.normal(size=(4, 4)) if kind == "bilinear" else None
    sims, cache = match_forward(kind, yA, yB, M)
    G = rng.normal(size=sims.shape)
    dA, dB, dM = match_backward(kind, cache, G)
    params, grads = [yA, yB], [dA, dB]
    if M is not None:
        params.append(M)
        grads.append(dM)
    assert grad_check(lambda _: float(np.sum(G * match_forward(kind, yA, yB, M)[0])), params, grads) <= 1e-4


def test_head_examples(rng):
    head = HeadParams.init(5, 8, rng)
    head.W2[:] = 0.0
    np.testing.assert_allclose(classify_head(rng.normal(size=5), head), [0.5, 0.5])
    head.b2[:] = [0.0, math.log(2)]
    np.testing.assert_allclose(classify_head(rng.normal(size=5), head), [1 / 3, 2 / 3], atol=1e-15)
    with pytest.raises(ValidationError):
        classify_head(np.ones(4), head)


def test_head_grad_check(rng):
    h = HeadParams.init(6, 5, rng)
    h.b1[:] = rng.normal(size=5) * 0.1
    f = rng.normal(size=(4, 6))
    G = rng.normal(size=(4, 2))

    def logits():
        a1 = np.maximum(f @ h.W1.T + h.b1, 0.0)
        return a1 @ h.W2.T + h.b2

    _, cache = head_forward(f, h.W1, h.b1, h.W2, h.b2)
    grads, df = head_backward(h.W1, h.W2, cache, G)
    err = grad_check(lambda _: float(np.sum(G * logits())), [h.W1, h.b1, h.W2, h.b2, f],
                     [grads["W1"], grads["b1"], grads["W2"], grads["b2"], df])
    assert err <= 1e-4


def test_loss_examples(rng):
    assert pair_loss(np.array([0.5, 0.5]), [0, 1], gamma=0) == pytest.approx(math.log(2), abs=1e-15)
    assert pair_loss(np.array([1.0, 0.0, 1.0]), [1, 0, 1], gamma=0) <= 1e-11
    p = rng.uniform(0.01, 0.99, size=20)
    y = rng.integers(0, 2, size=20)
    w = [rng.normal(size=(3, 2)), rng.normal(size=4)]
    scalar = sum(-math.log(pi) if yi else -math.log(1 - pi) for pi, yi in zip(p, y)) / 20
    scalar += 0.1 * sum(float(v) ** 2 for a in w for v in a.ravel())
    assert pair_loss(p, y, w, gamma=0.1) == pytest.approx(scalar, abs=1e-12)
    with pytest.raises(ValidationError):
        pair_loss(p, np.full(20, 2))


@given(st.floats(0.01, 0.98), st.sampled_from([0, 1]), st.floats(0, 1))
def test_loss_nonnegative_and_monotone(p, label, gamma):
    toward = p + 0.01 if label == 1 else p - 0.01
    assert pair_loss(np.array([p]), [label], (np.ones(2),), gamma=gamma) >= 0
    assert cross_entropy(toward, label) < cross_entropy(p, label)
