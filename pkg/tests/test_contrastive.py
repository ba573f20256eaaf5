import itertools
import math

import numpy as np
import pytest

from conftest import max_rel_error
from ipr.contrastive import (AugmentationPolicy, ContrastiveBatch, augment, augment_batch,
                             contrastive_loss, loss_from_similarity, positive_mask)
from ipr.numerics import ConfigError, DimensionError, RngStream, finite_diff_gradient


def brute_force_loss(Z, labels, tau, mode="supcon"):
    """Direct transcription of the per-anchor formula over the full similarity table."""
    M = len(Z)
    N = M // 2
    terms = []
    for a in range(M):
        others = [b for b in range(M) if b != a]
        denom = sum(math.exp(float(Z[a] @ Z[b]) / tau) for b in others)
        if mode == "supcon":
            pos = [p for p in others if labels[p] == labels[a] or p == (a + N) % M]
        else:
            pos = [(a + N) % M]
        terms.append(-sum(math.log(math.exp(float(Z[a] @ Z[p]) / tau) / denom)
                          for p in pos) / len(pos))
    return sum(terms) / M


def unit_rows(rng, n, d):
    X = rng.normal(size=(n, d))
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def test_identity_policy_returns_input():
    x = np.array([0.5, -1.0, 2.0])
    np.testing.assert_array_equal(augment(x, AugmentationPolicy.identity(), RngStream(0)), x)


def test_noise_only_statistics():
    x = np.zeros(1000)
    pol = AugmentationPolicy(noise_std=0.1, scale_range=(1, 1), dropout=0.0, mix_range=(0, 0))
    out = augment(x, pol, RngStream(3))
    assert 0.08 <= np.std(out - x, ddof=1) <= 0.12


def test_scaling_only_doubles():
    x = np.array([1.0, -2.0, 0.5])
    pol = AugmentationPolicy(noise_std=0.0, scale_range=(2, 2), dropout=0.0, mix_range=(0, 0))
    np.testing.assert_array_equal(augment(x, pol, RngStream(1)), 2 * x)


def test_augment_leaves_input_untouched_and_is_deterministic():
    X = RngStream(2).normal(size=(5, 4))
    copy = X.copy()
    a = augment_batch(X, AugmentationPolicy(), RngStream(9))
    b = augment_batch(X, AugmentationPolicy(), RngStream(9))
    np.testing.assert_array_equal(X, copy)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, X)


def test_policy_validation():
    for bad in ({"noise_std": -1}, {"dropout": 1.0}, {"scale_range": (0, 1)},
                {"mix_range": (0.5, 0.2)}, {"p_apply": 2}):
        with pytest.raises(ConfigError):
            AugmentationPolicy(**bad)


def test_worked_example_by_brute_force():
    # one pair at (1,0) plus a negative pair at (0,1), tau = 1
    Z = np.array([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    labels = np.array([0, 1, 0, 1])
    S = Z @ Z.T
    l, _, _ = loss_from_similarity(S, positive_mask(labels), 1.0)
    anchor_term = -math.log(math.e / (math.e + 1 + 1))
    assert anchor_term == pytest.approx(math.log(math.e + 2) - 1, abs=1e-15)
    assert anchor_term == pytest.approx(0.55144, abs=1e-5)
    # all four anchors are symmetric, so the mean equals the anchor term
    assert l == pytest.approx(anchor_term, abs=1e-12)
    assert l == pytest.approx(brute_force_loss(Z, labels, 1.0), abs=1e-12)


@pytest.mark.parametrize("mode", ["supcon", "pairwise_ntxent"])
@pytest.mark.parametrize("seed", range(5))
def test_matches_brute_force(mode, seed):
    rng = np.random.default_rng(seed)
    Z = unit_rows(rng, 8, 5)
    labels = rng.integers(0, 3, size=8)
    loss, _ = contrastive_loss(ContrastiveBatch(Z, labels, 0.5), mode)
    assert loss == pytest.approx(brute_force_loss(Z, labels, 0.5, mode), rel=1e-12)


@pytest.mark.parametrize("mode", ["supcon", "pairwise_ntxent"])
def test_large_temperature_limit(mode):
    rng = np.random.default_rng(0)
    for N in (2, 3, 5):
        Z = unit_rows(rng, 2 * N, 4)
        loss, _ = contrastive_loss(ContrastiveBatch(Z, rng.integers(0, 2, 2 * N), 1e6), mode)
        assert abs(loss - math.log(2 * N - 1)) < 1e-3


def test_uniform_degenerate_case():
    Z = np.tile([[1.0, 0.0]], (4, 1))
    loss, grad = contrastive_loss(ContrastiveBatch(Z, np.zeros(4, int), 0.1))
    assert loss == pytest.approx(math.log(3), abs=1e-12)
    assert loss == pytest.approx(brute_force_loss(Z, np.zeros(4), 0.1), abs=1e-12)


@pytest.mark.parametrize("mode", ["supcon", "pairwise_ntxent"])
@pytest.mark.parametrize("tau", [0.05, 0.1, 0.5])
@pytest.mark.parametrize("seed", range(5))
def test_gradient_matches_finite_differences(mode, tau, seed):
    rng = np.random.default_rng(100 + seed)
    Z = unit_rows(rng, 8, 4)
    labels = rng.integers(0, 2, size=8)
    _, grad = contrastive_loss(ContrastiveBatch(Z, labels, tau), mode)

    def f(flat):
        return contrastive_loss(ContrastiveBatch(flat.reshape(8, 4), labels, tau), mode)[0]

    num = finite_diff_gradient(f, Z.reshape(-1), 1e-6)
    assert max_rel_error(grad, num) < 1e-4


def test_permutation_invariance():
    rng = np.random.default_rng(7)
    N = 4
    Z = unit_rows(rng, 2 * N, 3)
    labels = rng.integers(0, 2, size=2 * N)
    base, _ = contrastive_loss(ContrastiveBatch(Z, labels))
    perm = rng.permutation(N)
    idx = np.concatenate([perm, perm + N])
    again, _ = contrastive_loss(ContrastiveBatch(Z[idx], labels[idx]))
    assert abs(base - again) <= 1e-10


def test_anchor_view_swap_invariance_with_shared_label():
    rng = np.random.default_rng(8)
    Z = unit_rows(rng, 6, 3)
    labels = np.zeros(6, int)
    base, _ = contrastive_loss(ContrastiveBatch(Z, labels))
    swapped, _ = contrastive_loss(ContrastiveBatch(np.vstack([Z[3:], Z[:3]]), labels))
    assert abs(base - swapped) <= 1e-10


def test_monotone_in_positive_similarity():
    rng = np.random.default_rng(9)
    Z = unit_rows(rng, 4, 3)
    labels = np.array([0, 1, 0, 1])
    S = Z @ Z.T
    pos = positive_mask(labels)
    base, _, _ = loss_from_similarity(S, pos, 0.1)
    S2 = S.copy()
    S2[0, 2] += 0.05
    S2[2, 0] += 0.05
    up, _, _ = loss_from_similarity(S2, pos, 0.1)
    assert up < base


def test_positive_mask_includes_pair_and_excludes_self():
    labels = np.array([0, 1, 1, 0])
    m = positive_mask(labels)
    assert not m.diagonal().any()
    # anchors 0 and 2 are paired even though their labels differ
    assert m[0, 2] and m[2, 0] and m[1, 3] and m[3, 1]
    assert m[1, 2] and m[0, 3]
    assert positive_mask(labels, "pairwise_ntxent").sum() == 4


def test_anchor_without_positive_is_skipped():
    S = np.eye(2)
    loss, dS, skipped = loss_from_similarity(S, np.zeros((2, 2), bool), 0.1)
    assert (loss, skipped) == (0.0, 2) and not dS.any()


def test_batch_validation():
    with pytest.raises(DimensionError):
        ContrastiveBatch(np.zeros((3, 2)), np.zeros(3))
    with pytest.raises(ConfigError):
        ContrastiveBatch(np.zeros((2, 2)), np.zeros(2), tau=0.0)
    with pytest.raises(ConfigError):
        positive_mask(np.zeros(2), "triplet")
    b = ContrastiveBatch.from_views(np.eye(2), np.eye(2), [0, 1], [0, 1])
    assert b.n_pairs == 2 and list(b.labels) == [0, 1, 0, 1]


def test_exhaustive_small_label_patterns():
    rng = np.random.default_rng(11)
    Z = unit_rows(rng, 4, 2)
    for labels in itertools.product(range(2), repeat=4):
        labels = np.array(labels)
        loss, _ = contrastive_loss(ContrastiveBatch(Z, labels, 0.3))
        assert loss == pytest.approx(brute_force_loss(Z, labels, 0.3), rel=1e-12)
