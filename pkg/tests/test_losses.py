import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gradcheck import LOSS_KINDS_ORDER, loss_case, loss_instance
from motionid.errors import ConfigError
from motionid.losses import (LOSS_KINDS, LossConfig, ProxyBank, arcface_loss, compute_loss,
                             contrastive_loss, cross_entropy_loss, multi_similarity_loss,
                             normalized_softmax_loss, triplet_margin_loss)


def _pair(d):
    return np.array([[0.0, 0.0], [d, 0.0]])


def test_contrastive_examples():
    inside = contrastive_loss(_pair(0.1), [0, 0], pos_margin=0.3, neg_margin=0.5)
    assert inside.value == 0.0
    res = contrastive_loss(_pair(0.2), [0, 1], pos_margin=0.3, neg_margin=0.5)
    assert res.value == pytest.approx(0.3, abs=1e-15)
    same = contrastive_loss(np.ones((4, 3)), [1, 1, 1, 1], pos_margin=0.0)
    assert same.value == 0.0 and same.degenerate


def test_contrastive_nonzero_averaging():
    # only the positive pair violates its margin (by 0.8); both negatives sit at or beyond 1.0
    emb = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    res = contrastive_loss(emb, [0, 0, 1], pos_margin=0.2, neg_margin=1.0)
    assert res.value == pytest.approx(0.8) and not res.degenerate


def test_triplet_examples():
    def triplet(dap, dan, margin):
        emb = np.array([[0.0, 0.0], [dap, 0.0], [0.0, dan]])
        return triplet_margin_loss(emb, [0, 0, 1], margin)
    # d(a,p)=0.2, d(a,n)=0.7 for both anchors of class 0
    emb = np.array([[0.0, 0.0], [0.2, 0.0], [-0.7, 0.0]])
    assert triplet_margin_loss(emb, [0, 0, 1], 0.3).value == 0.0
    emb = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.5]])
    res = triplet_margin_loss(emb, [0, 0, 1], 0.2)
    # anchor 0: 0.5 - 0.5 + 0.2 = 0.2; anchor 1: 0.5 - sqrt(0.5) + 0.2 < 0 is satisfied
    assert res.value == pytest.approx(0.2, abs=1e-15)
    assert triplet(0.0, 5.0, 0.4).value == 0.0
    assert triplet_margin_loss(np.eye(3), [0, 1, 2]).degenerate


def test_multi_similarity_examples():
    assert multi_similarity_loss(np.eye(3), [0, 1, 2]).degenerate
    # three unit vectors with pairwise cosine 0.5 == base
    emb = np.array([[1.0, 0.0, 0.0], [0.5, math.sqrt(3) / 2, 0.0], [0.5, 1 / (2 * math.sqrt(3)), math.sqrt(2 / 3)]])
    sims = emb @ emb.T
    np.testing.assert_allclose(sims[np.triu_indices(3, 1)], 0.5, atol=1e-12)
    res = multi_similarity_loss(emb, [0, 0, 1], alpha=2.0, beta=40.0, base=0.5)
    assert res.value == pytest.approx(math.log(2) / 2 + math.log(2) / 40, abs=1e-12)
    far = np.array([[1.0, 0.0], [1.0, 0.0], [-1.0, 0.0]])
    res = multi_similarity_loss(far, [0, 0, 1], alpha=2.0, beta=80.0, base=0.5)
    positive_only = math.log1p(math.exp(-2.0 * 0.5)) / 2
    assert res.value == pytest.approx(positive_only, abs=1e-20)


def test_multi_similarity_is_stable_for_extreme_parameters():
    rng = np.random.default_rng(0)
    res = multi_similarity_loss(rng.normal(size=(8, 4)), [0, 0, 1, 1, 2, 2, 3, 3], alpha=20, beta=80, base=-3)
    assert math.isfinite(res.value) and np.isfinite(res.grad).all()


def test_arcface_margin_zero_matches_normalized_softmax():
    emb, labels, proxies, _ = loss_instance("arcface", 1)
    a = arcface_loss(emb, labels, proxies, margin_degrees=0.0, scale=1.0, regularizer_weight=0.0)
    b = normalized_softmax_loss(emb, labels, proxies, temperature=1.0)
    assert a.value == pytest.approx(b.value, abs=1e-12)
    np.testing.assert_allclose(a.grad, b.grad, atol=1e-12)


def test_arcface_on_proxy_two_orthogonal_classes():
    proxies = np.eye(2)
    values = []
    for scale in (1.0, 2.0, 10.0, 211.0):
        res = arcface_loss(proxies[:1], [0], proxies, margin_degrees=3.5, scale=scale, regularizer_weight=9e-5)
        # two-class softmax: true logit scale*cos(theta + 3.5 deg), other logit scale*cos(90 deg) = 0;
        # theta is acos of the clamped cosine 1 - 1e-7
        theta = math.acos(1 - 1e-7)
        oracle = math.log1p(math.exp(-scale * math.cos(theta + math.radians(3.5))))
        assert res.value == pytest.approx(oracle, rel=1e-9, abs=1e-15)
        values.append(res.value)
    assert values == sorted(values, reverse=True) and values[0] > values[-1]
    assert values[0] == pytest.approx(0.3137710391228607, rel=1e-12)


def test_arcface_uniform_logits_and_regularizer():
    proxies = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
    emb = np.array([[0.0, 0.0, 1.0]])
    res = arcface_loss(emb, [1], proxies, margin_degrees=0.0, scale=30.0, regularizer_weight=0.0)
    assert res.value == pytest.approx(math.log(3), abs=1e-12)
    scaled = proxies * np.array([[2.0], [1.0], [0.5]])
    reg = arcface_loss(emb, [1], scaled, margin_degrees=0.0, scale=30.0, regularizer_weight=0.1)
    assert reg.value - res.value == pytest.approx(0.1 * (1.0 + 0.0 + 0.25) / 3, abs=1e-12)


def test_normalized_softmax_examples():
    proxies = np.eye(2)
    res = normalized_softmax_loss(proxies[:1], [0], proxies, temperature=1e-3)
    assert res.value < 1e-100
    mid = np.array([[1.0, 1.0]])
    for t in (1e-3, 0.01, 1.0):
        assert normalized_softmax_loss(mid, [1], proxies, t).value == pytest.approx(math.log(2), abs=1e-12)
    three = normalized_softmax_loss([[1.0, 2.0, 0.5]], [1], [[1, 0, 0], [0, 1, 0], [1, 1, 1]], 0.5)
    assert three.value == pytest.approx(0.8903597925717597, abs=1e-10)
    with pytest.raises(ConfigError):
        normalized_softmax_loss(mid, [0], proxies, 0.0)


def test_cross_entropy_examples():
    assert cross_entropy_loss(np.zeros((2, 5)), [0, 4]).value == pytest.approx(math.log(5))
    assert cross_entropy_loss([[1000.0, 0.0, 0.0]], [0]).value == pytest.approx(0.0, abs=1e-300)
    assert cross_entropy_loss([[1.0, 2.0, 3.0]], [2]).value == pytest.approx(0.40760596444438, abs=1e-12)
    with pytest.raises(IndexError):
        cross_entropy_loss([[1.0, 2.0]], [2])


@pytest.mark.parametrize("kind", LOSS_KINDS_ORDER)
def test_gradients_match_finite_differences(kind):
    assert max(loss_case(kind, seed) for seed in range(25)) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(LOSS_KINDS_ORDER))
def test_losses_are_permutation_invariant_and_non_negative(seed, kind):
    emb, labels, proxies, params = loss_instance(kind, seed)
    config = LossConfig(kind, params)
    base = compute_loss(config, emb, labels, proxies)
    perm = np.random.default_rng(seed).permutation(len(labels))
    moved = compute_loss(config, emb[perm], labels[perm], proxies)
    assert moved.value == pytest.approx(base.value, rel=1e-12, abs=1e-14)
    np.testing.assert_allclose(moved.grad, base.grad[perm], atol=1e-12)
    assert base.value >= 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["contrastive", "triplet_margin"]))
def test_tuple_losses_are_translation_invariant(seed, kind):
    emb, labels, _, params = loss_instance(kind, seed)
    shift = np.random.default_rng(seed).normal(size=emb.shape[1])
    config = LossConfig(kind, params)
    a = compute_loss(config, emb, labels).value
    b = compute_loss(config, emb + shift, labels).value
    assert b == pytest.approx(a, rel=1e-9, abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), kind=st.sampled_from(["arcface", "normalized_softmax", "multi_similarity"]))
def test_angular_losses_are_rotation_invariant(seed, kind):
    emb, labels, proxies, params = loss_instance(kind, seed)
    q, _ = np.linalg.qr(np.random.default_rng(seed).normal(size=(emb.shape[1], emb.shape[1])))
    config = LossConfig(kind, params)
    a = compute_loss(config, emb, labels, proxies).value
    b = compute_loss(config, emb @ q, labels, proxies @ q).value
    assert b == pytest.approx(a, rel=1e-9, abs=1e-12)


def test_hinge_losses_zero_when_margins_satisfied():
    emb = np.array([[0.0, 0.0], [0.01, 0.0], [5.0, 0.0], [5.01, 0.0]])
    assert contrastive_loss(emb, [0, 0, 1, 1], pos_margin=0.1, neg_margin=1.0).value == 0.0
    assert triplet_margin_loss(emb, [0, 0, 1, 1], margin=0.5).value == 0.0


def test_loss_config_validation(caplog):
    assert set(LOSS_KINDS) == set(LOSS_KINDS_ORDER)
    with pytest.raises(ConfigError):
        LossConfig("hinge")
    with pytest.raises(ConfigError):
        LossConfig("arcface", {"temperature": 1.0})
    cfg = LossConfig("arcface", {"scale": 900.0})
    assert cfg.params["scale"] == 900.0 and cfg.params["margin_degrees"] == 3.5
    assert "outside the search space" in caplog.text
    assert cfg.uses_proxies and not LossConfig("triplet_margin").uses_proxies


def test_proxy_bank_init():
    bank = ProxyBank.init(["a", "b", "c"], 16, seed=3)
    again = ProxyBank.init(["a", "b", "c"], 16, seed=3)
    assert bank.proxies.shape == (3, 16) and bank.proxies.tobytes() == again.proxies.tobytes()
    assert np.abs(bank.proxies).max() <= 1 / math.sqrt(16)
    assert bank.row("c") == 2
