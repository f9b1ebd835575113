import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdib.decoder import (
    KINDS,
    LIKELIHOODS,
    DecoderModel,
    WindowBuffer,
    apply_decoder_update,
    decoder_backprop,
    decoder_forward,
    decoder_logloss,
    feature_size,
    predict_mean,
    rate_pool,
    window_features,
    window_push,
)
from vdib.errors import ConfigError, ContractViolation


def test_window_push_order_and_padding():
    buf = WindowBuffer(2, 3)
    a, b, c, d = (np.array(v, float) for v in ([1, 2], [3, 4], [5, 6], [7, 8]))
    window_push(buf, a)
    np.testing.assert_array_equal(buf.features(), [0, 0, 0, 0, 1, 2])
    window_push(buf, b)
    window_push(buf, c)
    np.testing.assert_array_equal(buf.features(), [1, 2, 3, 4, 5, 6])
    window_push(buf, d)
    np.testing.assert_array_equal(buf.features(), [3, 4, 5, 6, 7, 8])
    assert buf.features().size == 2 * 3
    with pytest.raises(ContractViolation):
        window_push(buf, np.ones(3))
    with pytest.raises(ConfigError):
        WindowBuffer(2, 0)


def test_rate_pool():
    buf = WindowBuffer(3, 5)
    assert not rate_pool(buf).any()
    for _ in range(5):
        buf.push(np.array([1.0, 0.0, 1.0]))
    np.testing.assert_array_equal(rate_pool(buf), [5, 0, 5])
    rs = np.random.default_rng(0)
    rows = (rs.random((5, 3)) < 0.5).astype(float)
    for r in rows:
        buf.push(r)
    np.testing.assert_array_equal(rate_pool(buf), [sum(r[i] for r in rows) for i in range(3)])
    assert window_features(buf, "rate").shape == (3,)
    assert feature_size(3, 5, "time") == 15 and feature_size(3, 5, "rate") == 3
    with pytest.raises(ConfigError):
        window_features(buf, "phase")


def test_rate_pool_equals_tied_windowed_model():
    rs = np.random.default_rng(1)
    n_units, tau, n_out = 4, 3, 5
    rate = DecoderModel.create("linear_softmax", "categorical", n_units, n_out)
    rate.params["W"] = rs.normal(size=(n_out, n_units))
    rate.params["b"] = rs.normal(size=n_out)
    tied = DecoderModel.create("linear_softmax", "categorical", n_units * tau, n_out)
    tied.params["W"] = np.tile(rate.params["W"], (1, tau))
    tied.params["b"] = rate.params["b"].copy()
    buf = WindowBuffer(n_units, tau)
    for _ in range(7):
        buf.push((rs.random(n_units) < 0.5).astype(float))
        np.testing.assert_allclose(decoder_forward(rate, rate_pool(buf)),
                                   decoder_forward(tied, buf.features()), atol=1e-12)


def test_forward_examples():
    m = DecoderModel.create("linear_softmax", "categorical", 4, 3)
    np.testing.assert_array_equal(decoder_forward(m, np.ones(4)), np.zeros(3))
    np.testing.assert_allclose(predict_mean(m, np.ones(4)), np.full(3, 1 / 3))
    rs = np.random.default_rng(2)
    m.params["W"] = rs.normal(size=(3, 4))
    m.params["b"] = rs.normal(size=3)
    e = np.zeros(4)
    e[2] = 1.0
    np.testing.assert_allclose(decoder_forward(m, e), m.params["W"][:, 2] + m.params["b"])
    mlp = DecoderModel.create("mlp", "gaussian_unit", 4, 3, hidden_size=6)
    mlp.params["W1"] = -np.abs(rs.normal(size=(6, 4)))
    mlp.params["b1"] = -np.ones(6)
    mlp.params["b2"] = np.array([0.1, 0.2, 0.3])
    np.testing.assert_allclose(decoder_forward(mlp, rs.random(4)), [0.1, 0.2, 0.3])
    with pytest.raises(ContractViolation):
        decoder_forward(m, np.ones(5))


def test_model_validation():
    with pytest.raises(ConfigError):
        DecoderModel.create("conv", "categorical", 4, 3)
    with pytest.raises(ConfigError):
        DecoderModel.create("mlp", "poisson", 4, 3)
    assert DecoderModel.create("mlp", "categorical", 40, 3).hidden_size == 20


def test_logloss_examples():
    assert decoder_logloss(np.zeros(7), np.eye(7)[2], "categorical") == pytest.approx(np.log(7))
    assert decoder_logloss(np.zeros(6), 2, "categorical") == pytest.approx(np.log(6))
    assert decoder_logloss(np.zeros(10), np.full(10, 0.5), "bernoulli_pixel") == \
        pytest.approx(10 * np.log(2))
    r = np.array([0.3, -2.0, 5.0])
    assert decoder_logloss(r, r, "gaussian_unit") == 0.0
    with pytest.raises(ContractViolation):
        decoder_logloss(np.zeros(3), [0.5, 0.5, 0.0], "categorical")
    with pytest.raises(ContractViolation):
        decoder_logloss(np.zeros(3), [1.5, 0.5, 0.0], "bernoulli_pixel")
    with pytest.raises(ContractViolation):
        decoder_logloss(np.zeros(3), [np.nan, 0.5, 0.0], "gaussian_unit")
    with pytest.raises(ContractViolation):
        decoder_logloss(np.zeros(3), 3, "categorical")


@given(st.lists(st.floats(-40, 40), min_size=2, max_size=10), st.data())
def test_categorical_loss_nonnegative(logits, data):
    c = data.draw(st.integers(0, len(logits) - 1))
    assert decoder_logloss(np.array(logits), c, "categorical") >= 0.0


def test_flat_categorical_gradient():
    m = DecoderModel.create("linear_softmax", "categorical", 2, 3)
    m.params["b"] = np.array([100.0, 0.0, 0.0])
    g, loss = decoder_backprop(m, np.ones(2), 0)
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert all(np.abs(v).max() < 1e-12 for v in g.values())
    # hopelessly wrong prediction hits the clamp: loss saturates, gradient vanishes
    g, loss = decoder_backprop(m, np.ones(2), 1)
    assert loss == pytest.approx(-np.log(1e-7))
    assert all(not v.any() for v in g.values())


def test_gaussian_linear_gradient_closed_form():
    rs = np.random.default_rng(3)
    m = DecoderModel.create("linear_softmax", "gaussian_unit", 5, 3)
    m.params["W"] = rs.normal(size=(3, 5))
    f, r = rs.normal(size=5), rs.normal(size=3)
    g, _ = decoder_backprop(m, f, r)
    o = m.params["W"] @ f
    np.testing.assert_allclose(g["W"], np.outer(o - r, f), atol=1e-14)
    np.testing.assert_allclose(g["b"], o - r, atol=1e-14)


def _random_instance(kind, likelihood, seed):
    rs = np.random.default_rng(seed)
    n_in, n_out = int(rs.integers(2, 7)), int(rs.integers(2, 6))
    m = DecoderModel.create(kind, likelihood, n_in, n_out, seed=seed,
                            hidden_size=int(rs.integers(2, 6)) if kind == "mlp" else None)
    for k in m.params:
        m.params[k] = rs.normal(0, 0.7, m.params[k].shape)
    f = (rs.random(n_in) < 0.5).astype(float) + rs.normal(0, 0.1, n_in)
    if likelihood == "categorical":
        r = np.eye(n_out)[rs.integers(n_out)]
    elif likelihood == "bernoulli_pixel":
        r = rs.random(n_out)
    else:
        r = rs.normal(size=n_out)
    return m, f, r


def fd_relative_error(m, f, r, h=1e-5):
    g, _ = decoder_backprop(m, f, r)
    worst = 0.0
    for k, arr in m.params.items():
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = decoder_backprop(m, f, r)[1]
            arr[idx] = old - h
            dn = decoder_backprop(m, f, r)[1]
            arr[idx] = old
            fd[idx] = (up - dn) / (2 * h)
        worst = max(worst, np.abs(g[k] - fd).max() / max(np.abs(fd).max(), 1e-12))
    return worst


@pytest.mark.parametrize("kind", KINDS)
@pytest.mark.parametrize("likelihood", LIKELIHOODS)
def test_backprop_matches_finite_differences(kind, likelihood):
    errs = [fd_relative_error(*_random_instance(kind, likelihood, s)) for s in range(20)]
    assert max(errs) <= 1e-6


def test_update_descends():
    m, f, r = _random_instance("mlp", "bernoulli_pixel", 0)
    g, before = decoder_backprop(m, f, r)
    apply_decoder_update(m, g, 1e-3)
    assert decoder_backprop(m, f, r)[1] < before
    snapshot = {k: v.copy() for k, v in m.params.items()}
    apply_decoder_update(m, g, 0.0)
    for k in snapshot:
        np.testing.assert_array_equal(snapshot[k], m.params[k])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_batch_forward_matches_rows(seed):
    m, _, _ = _random_instance("mlp", "gaussian_unit", seed)
    X = np.random.default_rng(seed).normal(size=(4, m.n_in))
    np.testing.assert_allclose(decoder_forward(m, X), [decoder_forward(m, x) for x in X],
                               atol=1e-12)
