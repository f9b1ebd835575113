import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vdib.encoder import (
    HIDDEN,
    READOUT,
    EncoderNetwork,
    FilterParams,
    HiddenLayer,
    ReadoutLayer,
    TraceState,
    ar_synaptic_response,
    build_alpha_kernel,
    build_feedback_kernel,
    build_readout_kernels,
    hidden_eligibility,
    hidden_step,
    learning_signal,
    membrane_potential,
    readout_eligibility,
    readout_step,
    sequence_log_prob,
    trace_step,
)
from vdib.errors import ConfigError, ContractViolation
from vdib.mathcore import Rng, causal_convolve_all, log_bernoulli_logit, sigmoid


def test_filter_params_validation():
    with pytest.raises(ConfigError):
        FilterParams(tau_mem=5.0, tau_syn=5.0)
    with pytest.raises(ConfigError):
        FilterParams(tau_e=0)
    with pytest.raises(ConfigError):
        FilterParams(tau_e=3, num_kernels=4)
    with pytest.raises(ConfigError):
        FilterParams(tau_ref=-1.0)


def test_alpha_kernel():
    k = build_alpha_kernel(FilterParams(tau_mem=10.0, tau_syn=2.0, tau_e=8))
    assert k[0] == 0.0
    # e^-0.1 - e^-0.5
    assert k[1] == pytest.approx(0.2983067, abs=1e-7)
    assert k[9] == 0.0 and k.memory == 8
    long = build_alpha_kernel(FilterParams(tau_e=2000))
    assert abs(long[2000]) < 1e-40


def test_default_alpha_taps():
    # mpmath, 30 digits
    expect = [0.0, 0.13249867142273215, 0.23451737200032027, 0.31189634033103137,
              0.36940178896076027, 0.41092134189996255]
    np.testing.assert_allclose(build_alpha_kernel(FilterParams()).taps, expect, atol=1e-15)


def test_readout_kernels():
    p = FilterParams(tau_e=5, num_kernels=3)
    base = build_alpha_kernel(p)
    ks = build_readout_kernels(p)
    assert len(ks) == 3
    np.testing.assert_array_equal(ks[0].taps, base.taps)
    assert ks[2][3] == base[1]
    for k, f in enumerate(ks):
        assert all(f[d] == 0.0 for d in range(k + 1))
        assert f[6] == 0.0


def test_feedback_kernel():
    f = build_feedback_kernel(FilterParams(tau_ref=10.0, tau_e=4))
    np.testing.assert_allclose(f.taps, [0.0, 1.0, np.exp(-0.1), np.exp(-0.2), np.exp(-0.3)])


def test_ar_response_taps():
    # closed form (a^(d-1) - b^(d-1)) / (a - b), mpmath
    f = ar_synaptic_response(FilterParams(), 4)
    np.testing.assert_allclose(f.taps, [0.0, 0.0, 1.0, 1.7699601775786959], atol=1e-14)


def test_trace_step_examples():
    p = FilterParams()
    s = TraceState.zeros(2, 1)
    s = trace_step(s, [0, 0], [0], p)
    assert not s.p.any() and not s.q.any() and not s.r.any()
    s = trace_step(s, [1, 0], [1], p)
    assert s.q[0] == 1.0 and s.p[0] == 0.0 and s.r[0] == 1.0
    s = trace_step(s, [0, 0], [0], p)
    assert s.p[0] == 1.0
    with pytest.raises(ContractViolation):
        trace_step(s, [1, 0, 0], [0], p)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 100))
def test_ar_recursion_equals_convolution(seed, T):
    p = FilterParams()
    rs = np.random.default_rng(seed)
    s_pre = (rs.random((T, 3)) < 0.3).astype(float)
    s_post = (rs.random((T, 2)) < 0.3).astype(float)
    state = TraceState.zeros(3, 2)
    ps, rr = [], []
    for t in range(T):
        prev = (s_pre[t - 1], s_post[t - 1]) if t else (np.zeros(3), np.zeros(2))
        state = trace_step(state, *prev, p)
        ps.append(state.p.copy())
        rr.append(state.r.copy())
    # tap 0 is zero in both responses, so the one-step injection lag is built in
    conv_p = causal_convolve_all(ar_synaptic_response(p, T + 1), s_pre)
    conv_r = causal_convolve_all(build_feedback_kernel(FilterParams(tau_e=T + 1)), s_post)
    np.testing.assert_allclose(ps, conv_p, atol=1e-9)
    np.testing.assert_allclose(rr, conv_r, atol=1e-9)


def test_membrane_potential_examples():
    p = FilterParams()
    h = HiddenLayer(1, 1, p)
    h.W[0, 0] = 0.3
    h.b[0] = -0.1
    assert membrane_potential(h)[0] == pytest.approx(-0.1)  # rest
    h.state.p[0] = 1.0
    assert membrane_potential(h)[0] == pytest.approx(0.2)
    h.state.r[0] = 0.7
    h.w_fb[0] = 0.4
    u = membrane_potential(h)[0]
    h.W *= 2
    h.w_fb *= 2
    h.b *= 2
    assert membrane_potential(h)[0] == pytest.approx(2 * u)


def test_readout_potential_sums_kernels():
    p = FilterParams(tau_e=4, num_kernels=2)
    ro = ReadoutLayer(3, 2, p)
    rs = np.random.default_rng(0)
    ro.W[...] = rs.normal(size=ro.W.shape)
    ro.w_fb[:] = [0.2, -0.4]
    ro.b[:] = [0.1, -1.0]
    ro.P = rs.random((3, 2))
    ro.r = rs.random(2)
    want = [sum(ro.W[i, j, k] * ro.P[j, k] for j in range(3) for k in range(2))
            + ro.w_fb[i] * ro.r[i] + ro.b[i] for i in range(2)]
    np.testing.assert_allclose(membrane_potential(ro), want, atol=1e-14)


def test_hidden_step():
    np.testing.assert_array_equal(hidden_step([-0.5, 0.5]), [0.0, 1.0])
    assert hidden_step([0.0])[0] == 0.0
    assert hidden_step([1e-12])[0] == 1.0


def test_readout_step():
    y, lp = readout_step(np.zeros(1), Rng(0), clamp=[1.0])
    assert lp[0] == pytest.approx(np.log(0.5))
    y, lp = readout_step(np.full(100, -50.0), Rng(0))
    assert not y.any() and np.all(np.isfinite(lp))
    rng = Rng(5)
    n = 100_000
    y = np.concatenate([readout_step(np.ones(1000), rng)[0] for _ in range(100)])
    p1 = 0.7310585786300049
    assert abs(y.mean() - p1) < 3 * np.sqrt(p1 * (1 - p1) / n)
    with pytest.raises(ContractViolation):
        readout_step(np.zeros(2), rng, clamp=[1.0])


def test_readout_eligibility_examples():
    e = readout_eligibility(np.zeros((2, 1)), np.zeros(1), np.zeros(1), np.ones(1))
    assert not e.synaptic.any()
    e = readout_eligibility(np.ones((1, 1)), np.ones(1), np.zeros(1), np.ones(1))
    assert e.synaptic[0, 0, 0] == 0.5 and e.feedback[0] == 0.5 and e.bias[0] == 0.5


def _fd_readout_check(seed, h=1e-5):
    """Max relative error of every readout eligibility class vs centred differences."""
    rs = np.random.default_rng(seed)
    n_pre, n_post = int(rs.integers(1, 5)), int(rs.integers(1, 4))
    K = int(rs.integers(1, 4))
    ro = ReadoutLayer(n_pre, n_post, FilterParams(tau_e=5, num_kernels=K))
    ro.W[...] = rs.normal(0, 0.5, ro.W.shape)
    ro.w_fb[:] = rs.normal(0, 0.5, n_post)
    ro.b[:] = rs.normal(0, 0.5, n_post)
    ro.P = rs.random((n_pre, K)) * 2
    ro.r = rs.random(n_post) * 2
    y = (rs.random(n_post) < 0.5).astype(float)

    def loglik():
        return float(np.sum(log_bernoulli_logit(y, ro.potential())))

    e = readout_eligibility(ro.P, ro.r, ro.potential(), y).dense()
    worst = 0.0
    for name, arr in (("W", ro.W), ("w_fb", ro.w_fb), ("b", ro.b)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            arr[idx] = old + h
            up = loglik()
            arr[idx] = old - h
            dn = loglik()
            arr[idx] = old
            fd[idx] = (up - dn) / (2 * h)
        scale = max(np.abs(fd).max(), 1e-12)
        worst = max(worst, np.abs(e[name] - fd).max() / scale)
    return worst


@pytest.mark.parametrize("seed", range(25))
def test_readout_eligibility_matches_finite_differences(seed):
    assert _fd_readout_check(seed) <= 1e-6


def test_hidden_eligibility_examples():
    e = hidden_eligibility(np.ones(1), np.ones(1), np.zeros(1))
    assert e.synaptic[0, 0] == 0.25 and e.feedback[0] == 0.25 and e.bias[0] == 0.25
    e = hidden_eligibility(np.zeros(1), np.zeros(1), np.zeros(1))
    assert e.synaptic[0, 0] == 0.0
    e = hidden_eligibility(np.ones(2), np.ones(2), np.array([30.0, -30.0]))
    assert np.all(np.abs(e.synaptic) < 1e-12)
    e = hidden_eligibility(np.ones(1), np.ones(1), np.array([0.7]), theta=0.7)
    assert e.bias[0] == 0.25


def test_learning_signal_examples():
    s = np.array([0.3, 0.6])
    np.testing.assert_array_equal(learning_signal(np.ones((4, 2)), s, s), np.zeros(4))
    np.testing.assert_allclose(learning_signal(np.eye(2), [1.0, 0.0], s), [0.7, -0.6])
    np.testing.assert_allclose(learning_signal(np.ones((3, 2)), [1.0, 0.0], [0.5, 0.3]),
                               [0.2, 0.2, 0.2])
    with pytest.raises(ContractViolation):
        learning_signal(np.ones((3, 3)), [1.0, 0.0], [0.5, 0.3])


def _net(seed=0, hidden=(4,), n_in=3, n_out=2, **kw):
    return EncoderNetwork(n_in, list(hidden), n_out, FilterParams(tau_e=3, **kw), seed=seed)


def test_network_layout():
    net = _net(hidden=(5, 4))
    assert [l.kind for l in net.layers] == [HIDDEN, HIDDEN, READOUT]
    assert net.layers[0].W.shape == (5, 3) and net.layers[1].W.shape == (4, 5)
    assert net.readout.W.shape == (2, 4, 1)
    assert [B.shape for B in net.feedback] == [(5, 2), (4, 2)]
    with pytest.raises(ConfigError):
        EncoderNetwork(0, [], 2, FilterParams())
    with pytest.raises(ConfigError):
        EncoderNetwork(2, [], 2, FilterParams(), surrogate="nope")


def test_initialization_ranges():
    net = _net(hidden=(50,), n_in=40, n_out=8)
    c = np.sqrt(1 / 40)
    assert np.abs(net.hidden[0].W).max() <= c
    assert np.abs(net.feedback[0]).max() <= 1 / np.sqrt(8)
    assert np.all(net.readout.b == -1.0)


def test_forward_step_zero_weights():
    net = _net(hidden=())
    for l in net.layers:
        l.W[...] = 0.0
        l.w_fb[:] = 0.0
        l.b[:] = -5.0
    out = net.forward_step(np.ones(3), Rng(0))
    np.testing.assert_allclose(out.sigma_u, sigmoid(-5.0))
    assert sigmoid(-5.0) == pytest.approx(0.0066928509, abs=1e-10)


def test_forward_step_contracts():
    net = _net()
    with pytest.raises(ContractViolation):
        net.forward_step(np.ones(4), Rng(0))
    with pytest.raises(ContractViolation):
        net.forward_step(np.ones(3), None)


def test_determinism_and_reset():
    rs = np.random.default_rng(1)
    x = (rs.random((3, 40)) < 0.4).astype(float)
    net = _net(seed=3)
    y1, lp1, h1 = net.run(x, Rng(9))
    net.forward_step(np.ones(3), Rng(1))  # dirty the state
    y2, lp2, h2 = net.run(x, Rng(9))
    y3, lp3, _ = _net(seed=3).run(x, Rng(9))
    np.testing.assert_array_equal(y1, y2)
    np.testing.assert_array_equal(y1, y3)
    assert lp1 == lp2 == lp3
    np.testing.assert_array_equal(h1[0], h2[0])


def test_hidden_deterministic_under_clamp():
    rs = np.random.default_rng(2)
    net = _net(seed=4, hidden=(6,))
    net.hidden[0].W *= 4  # make the hidden layer actually spike
    x = (rs.random((3, 30)) < 0.5).astype(float)
    y = (rs.random((2, 30)) < 0.5).astype(float)
    _, _, h1 = net.run(x, clamp=y)
    _, _, h2 = net.run(x, clamp=y)
    np.testing.assert_array_equal(h1[0], h2[0])
    assert h1[0].any()


def test_sequence_log_prob_empty_and_replay():
    net = _net(seed=5)
    assert sequence_log_prob(net, np.zeros((3, 0)), np.zeros((2, 0))) == 0.0
    x = (np.random.default_rng(0).random((3, 25)) < 0.4).astype(float)
    y, lp, _ = net.run(x, Rng(2))
    assert sequence_log_prob(net, x, y) == pytest.approx(lp, abs=1e-9)
    with pytest.raises(ContractViolation):
        sequence_log_prob(net, x, y[:, :-1])


@pytest.mark.parametrize("hidden,n_out,T,K", [((), 2, 3, 1), ((3,), 2, 4, 2), ((), 3, 4, 3),
                                              ((2, 2), 1, 6, 1)])
def test_normalization(hidden, n_out, T, K):
    net = EncoderNetwork(3, list(hidden), n_out, FilterParams(tau_e=4, num_kernels=K), seed=7)
    net.readout.W *= 3
    x = (np.random.default_rng(1).random((3, T)) < 0.5).astype(float)
    total = 0.0
    for bits in itertools.product([0.0, 1.0], repeat=n_out * T):
        total += np.exp(sequence_log_prob(net, x, np.array(bits).reshape(n_out, T)))
    assert abs(total - 1.0) <= 1e-10


def test_readout_truncation():
    """One extra input spike stops moving readout potentials after tau_e steps."""
    tau = 4
    net = EncoderNetwork(3, [], 2, FilterParams(tau_e=tau), seed=2)
    x = np.zeros((3, 20))
    y = (np.random.default_rng(3).random((2, 20)) < 0.3).astype(float)
    x2 = x.copy()
    x2[1, 5] = 1.0

    def potentials(inp):
        net.reset()
        return np.array([net.forward_step(inp[:, t], clamp=y[:, t]).u for t in range(20)])

    diff = np.abs(potentials(x) - potentials(x2)).max(axis=1)
    assert diff[6:6 + tau].max() > 0  # visible from the next step through t + tau
    assert np.all(diff[:6] == 0)
    assert np.all(diff[6 + tau:] == 0)


def test_feedback_matrix_frozen_and_dger_update():
    net = _net(seed=1, hidden=(5,))
    B0 = [B.copy() for B in net.feedback]
    W0 = net.hidden[0].W.copy()
    rng = Rng(0)
    out = None
    for t in range(10):
        out = net.forward_step(np.ones(3), rng)
        net.apply_update(out.deltas, 0.1)
    for a, b in zip(B0, net.feedback):
        np.testing.assert_array_equal(a, b)
    assert net.hidden[0].W.flags.f_contiguous
    # in-place BLAS rank-1 update agrees with the dense outer product
    W_before = net.hidden[0].W.copy()
    d = out.deltas[0]
    net.apply_update(out.deltas, 0.05)
    np.testing.assert_allclose(net.hidden[0].W, W_before - 0.05 * d.synaptic, atol=1e-15)
    assert not np.array_equal(W0, net.hidden[0].W)
