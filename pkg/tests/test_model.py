import math

import numpy as np
import pytest

from conftest import flat_grads, max_rel_error, numeric_param_grad
from ipr.model import (Dense, ModelParams, NonFiniteGradientError, OptimizerState, UsageError,
                       backward, classify, cross_entropy_batch, cross_entropy_loss, encode,
                       forward, init_params, load_checkpoint, optimizer_step, save_checkpoint)
from ipr.numerics import DimensionError, RngStream, gelu, normalize_rows


def reference_forward(params, x):
    """Loop-based forward pass written independently of the library."""
    def layer(vec, W, b, act):
        out = []
        for j in range(W.shape[1]):
            s = b[j]
            for i in range(W.shape[0]):
                s += vec[i] * W[i, j]
            if act == "gelu":
                s = 0.5 * s * (1 + math.tanh(math.sqrt(2 / math.pi) * (s + 0.044715 * s ** 3)))
            out.append(s)
        return out

    h = list(x)
    for L in params.encoder:
        h = layer(h, L.W, L.b, L.activation)
    logits = h
    for L in params.classifier:
        logits = layer(logits, L.W, L.b, L.activation)
    return np.array(h), np.array(logits)


def zero_params(d_in=3, d_emb=4, C=4):
    return ModelParams([Dense(np.zeros((d_in, 5)), np.zeros(5), "gelu"),
                        Dense(np.zeros((5, d_emb)), np.zeros(d_emb))],
                       [Dense(np.zeros((d_emb, C)), np.zeros(C))])


def test_encode_zero_weights_gives_zero_embedding():
    np.testing.assert_array_equal(encode(zero_params(), [0.3, -2.0, 5.0]), np.zeros(4))


def test_encode_identity_layer():
    p = ModelParams([Dense(np.eye(2), np.zeros(2))], [Dense(np.eye(2), np.zeros(2))])
    np.testing.assert_array_equal(encode(p, [1.0, 2.0]), [1.0, 2.0])


def test_encode_and_classify_match_reference_forward():
    p = init_params(5, 3, hidden=(6, 4), d_emb=4, classifier_hidden=(3,), rng=RngStream(9))
    x = RngStream(10).normal(size=5)
    h_ref, logits_ref = reference_forward(p, x)
    np.testing.assert_allclose(encode(p, x), h_ref, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(classify(p, encode(p, x)), logits_ref, rtol=1e-13, atol=1e-14)


def test_classify_examples():
    np.testing.assert_array_equal(classify(zero_params(), [1.0, 2.0, 3.0, 4.0]), np.zeros(4))
    p = ModelParams([Dense(np.eye(4), np.zeros(4))], [Dense(np.eye(4), np.zeros(4))])
    np.testing.assert_array_equal(classify(p, [2.0, 1.0, 0.0, 0.0]), [2.0, 1.0, 0.0, 0.0])


def test_dimension_mismatch_errors():
    p = zero_params()
    with pytest.raises(DimensionError):
        encode(p, [1.0, 2.0])
    with pytest.raises(DimensionError):
        classify(p, [1.0, 2.0])
    with pytest.raises(DimensionError):
        ModelParams([Dense(np.zeros((3, 4)), np.zeros(4))], [Dense(np.zeros((5, 2)), np.zeros(2))])


def test_forward_is_deterministic():
    p = init_params(6, 4, rng=RngStream(1))
    X = RngStream(2).normal(size=(5, 6))
    a, b = forward(p, X), forward(p, X)
    assert a.embedding.tobytes() == b.embedding.tobytes()
    assert a.logits.tobytes() == b.logits.tobytes()


def test_cross_entropy_examples():
    loss, grad = cross_entropy_loss(np.zeros(4), 2)
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    np.testing.assert_allclose(grad, [0.25, 0.25, -0.75, 0.25])
    loss, _ = cross_entropy_loss([10.0, -10.0], 0)
    assert loss == pytest.approx(math.log1p(math.exp(-20.0)), rel=1e-9)
    assert loss == pytest.approx(2.06e-9, rel=1e-2)
    loss, grad = cross_entropy_loss([3.0, -1.0, 0.5], 1, weight=0.0)
    assert loss == 0.0 and not grad.any()
    with pytest.raises(DimensionError):
        cross_entropy_loss([1.0, 2.0], 2)


def test_cross_entropy_gradient_matches_finite_differences():
    from ipr.numerics import finite_diff_gradient
    logits = np.array([0.3, -1.2, 2.0, 0.1])
    _, g = cross_entropy_loss(logits, 1, weight=0.7)
    num = finite_diff_gradient(lambda z: cross_entropy_loss(z, 1, weight=0.7)[0], logits)
    assert max_rel_error(g, num) < 1e-6


def test_batched_soft_cross_entropy_reduces_to_hard():
    logits = RngStream(3).normal(size=(4, 3))
    y = np.array([0, 2, 1, 1])
    hard = cross_entropy_batch(logits, y)
    soft = cross_entropy_batch(logits, np.eye(3)[y])
    assert hard[0] == pytest.approx(soft[0], abs=1e-14)
    np.testing.assert_allclose(hard[1], soft[1], atol=1e-15)


def test_backward_zero_upstream_gives_zero_grads():
    p = init_params(3, 2, hidden=(4,), d_emb=3, rng=RngStream(0))
    fr = forward(p, RngStream(1).normal(size=(2, 3)))
    grads = backward(p, fr.cache, d_logits=np.zeros((2, 2)))
    assert all(not g.any() for g in grads.values())


def test_backward_without_cache_is_usage_error():
    p = init_params(3, 2, rng=RngStream(0))
    with pytest.raises(UsageError):
        backward(p, None, d_logits=np.zeros((1, 2)))


def test_backward_linear_squared_loss_closed_form():
    rng = RngStream(4)
    W = rng.normal(size=(3, 2))
    b = rng.normal(size=2)
    p = ModelParams([Dense(W.copy(), b.copy())], [Dense(np.eye(2), np.zeros(2))])
    x = rng.normal(size=3)
    target = rng.normal(size=2)
    fr = forward(p, x[None, :])
    residual = fr.embedding[0] - target
    grads = backward(p, fr.cache, d_embedding=residual[None, :])
    np.testing.assert_allclose(grads["encoder.0.W"], np.outer(x, residual), atol=1e-14)
    np.testing.assert_allclose(grads["encoder.0.b"], residual, atol=1e-14)


@pytest.mark.parametrize("seed", [7, 8, 9, 10, 11])
def test_backward_matches_finite_differences(seed):
    rng = RngStream(seed)
    p = init_params(3, 3, hidden=(5,), d_emb=4, classifier_hidden=(3,), rng=rng)
    X = rng.normal(size=(4, 3))
    y = np.array([0, 1, 2, 1])
    W_unit = rng.normal(size=(4, 4))

    def loss(params):
        fr = forward(params, X)
        ce, _ = cross_entropy_batch(fr.logits, y)
        return ce + float(np.sum(fr.unit * W_unit))

    fr = forward(p, X)
    _, dlog = cross_entropy_batch(fr.logits, y)
    grads = backward(p, fr.cache, d_logits=dlog, d_unit=W_unit)
    assert max_rel_error(flat_grads(p, grads), numeric_param_grad(p, loss)) < 1e-4


def scalar_params(w=1.0):
    return ModelParams([Dense(np.array([[w]]), np.zeros(1))], [Dense(np.eye(1), np.zeros(1))])


def zero_grads(p):
    return {n: np.zeros_like(a) for n, a in p.named_arrays()}


def test_optimizer_zero_gradient_is_identity():
    p = init_params(4, 3, rng=RngStream(5))
    before = p.copy()
    optimizer_step(p, zero_grads(p), OptimizerState(lr=0.1, weight_decay=0.0))
    for (_, a), (_, b) in zip(p.named_arrays(), before.named_arrays()):
        assert a.tobytes() == b.tobytes()


def test_optimizer_single_step_hand_computed():
    p = scalar_params(1.0)
    g = zero_grads(p)
    g["encoder.0.W"] = np.array([[1.0]])
    state = OptimizerState(lr=0.1, weight_decay=0.0)
    optimizer_step(p, g, state)
    # m_hat = 1, v_hat = 1 after bias correction
    expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8)
    assert p.encoder[0].W[0, 0] == pytest.approx(expected, abs=1e-15)
    assert 1.0 - p.encoder[0].W[0, 0] == pytest.approx(0.1, abs=1e-8)
    assert state.step == 1


def test_optimizer_decoupled_weight_decay():
    p = scalar_params(2.0)
    optimizer_step(p, zero_grads(p), OptimizerState(lr=0.1, weight_decay=0.5))
    assert p.encoder[0].W[0, 0] == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)


def test_optimizer_rejects_nonfinite_gradient():
    p = scalar_params(1.0)
    g = zero_grads(p)
    g["encoder.0.b"] = np.array([np.nan])
    state = OptimizerState()
    with pytest.raises(NonFiniteGradientError, match="encoder.0.b"):
        optimizer_step(p, g, state)
    assert p.encoder[0].W[0, 0] == 1.0 and state.step == 0


def test_checkpoint_round_trip_is_exact(tmp_path):
    p = init_params(5, 4, rng=RngStream(12))
    path = tmp_path / "ckpt.json"
    save_checkpoint(p, path, {"seed": 12})
    q = load_checkpoint(path)
    for (na, a), (nb, b) in zip(p.named_arrays(), q.named_arrays()):
        assert na == nb and a.tobytes() == b.tobytes()
    assert [l.activation for l in q.encoder] == [l.activation for l in p.encoder]


def test_unit_embedding_is_normalized():
    p = init_params(4, 2, rng=RngStream(2))
    fr = forward(p, RngStream(3).normal(size=(6, 4)))
    np.testing.assert_allclose(np.linalg.norm(fr.unit, axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(fr.unit, normalize_rows(fr.embedding)[0])
