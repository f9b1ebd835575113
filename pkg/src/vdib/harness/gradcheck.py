"""Release gate: finite-difference and enumeration checks of every gradient path."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from ..data import LabeledSequence
from ..decoder import KINDS, LIKELIHOODS, DecoderModel, decoder_backprop
from ..encoder import EncoderNetwork, FilterParams, ReadoutLayer, readout_eligibility, sequence_log_prob
from ..errors import ConfigError
from ..mathcore import log_bernoulli, log_bernoulli_logit
from ..trainer import (
    VdibConfig,
    VdibSystem,
    all_readout_trains,
    enumerate_expected_loss,
    run_episode,
)

SCOPES = ("all", "decoder", "readout", "oracle")
FD_RTOL = 1e-6
NORM_ATOL = 1e-10
ORACLE_ATOL = 1e-8
KL_ATOL = 1e-9


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3e} (tol {self.tolerance:.0e}, {self.seconds:.1f}s)"


@dataclass
class GradcheckReport:
    results: list[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def lines(self) -> list[str]:
        return [r.line() for r in self.results]

    def to_dict(self) -> dict:
        return {"passed": self.passed,
                "checks": [dict(r.__dict__) for r in self.results]}


def _central(f, arr, idx, h):
    old = arr[idx]
    arr[idx] = old + h
    up = f()
    arr[idx] = old - h
    dn = f()
    arr[idx] = old
    return (up - dn) / (2 * h)


# --- readout -------------------------------------------------------------------


def readout_fd_error(seed: int, eligibility=readout_eligibility, h: float = 1e-5) -> float:
    """Max relative error of readout eligibilities against centred differences."""
    rs = np.random.default_rng(seed)
    n_pre, n_post, K = int(rs.integers(1, 5)), int(rs.integers(1, 4)), int(rs.integers(1, 4))
    ro = ReadoutLayer(n_pre, n_post, FilterParams(tau_e=5, num_kernels=K))
    ro.W[...] = rs.normal(0, 0.5, ro.W.shape)
    ro.w_fb[:] = rs.normal(0, 0.5, n_post)
    ro.b[:] = rs.normal(0, 0.5, n_post)
    ro.P = rs.random((n_pre, K)) * 2
    ro.r = rs.random(n_post) * 2
    y = (rs.random(n_post) < 0.5).astype(float)

    def loglik():
        return float(np.sum(log_bernoulli_logit(y, ro.potential())))

    e = eligibility(ro.P, ro.r, ro.potential(), y).dense()
    worst = 0.0
    for name, arr in (("W", ro.W), ("w_fb", ro.w_fb), ("b", ro.b)):
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            fd[idx] = _central(loglik, arr, idx, h)
        worst = max(worst, np.abs(e[name] - fd).max() / max(np.abs(fd).max(), 1e-12))
    return worst


def check_readout(n_instances: int = 20, eligibility=readout_eligibility) -> CheckResult:
    t0 = time.perf_counter()
    err = max(readout_fd_error(s, eligibility) for s in range(n_instances))
    return CheckResult("readout_eligibility_fd", err <= FD_RTOL, err, FD_RTOL,
                       time.perf_counter() - t0, f"{n_instances} instances")


# --- decoder ---------------------------------------------------------------------


def decoder_fd_error(kind: str, likelihood: str, seed: int, h: float = 1e-5) -> float:
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
    g, _ = decoder_backprop(m, f, r)
    worst = 0.0
    for k, arr in m.params.items():
        fd = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            fd[idx] = _central(lambda: decoder_backprop(m, f, r)[1], arr, idx, h)
        worst = max(worst, np.abs(g[k] - fd).max() / max(np.abs(fd).max(), 1e-12))
    return worst


def check_decoder(n_instances: int = 20) -> list[CheckResult]:
    out = []
    for kind, lik in itertools.product(KINDS, LIKELIHOODS):
        t0 = time.perf_counter()
        err = max(decoder_fd_error(kind, lik, s) for s in range(n_instances))
        out.append(CheckResult(f"decoder_fd[{kind},{lik}]", err <= FD_RTOL, err, FD_RTOL,
                               time.perf_counter() - t0))
    return out


# --- normalization and enumeration oracles ---------------------------------------------


def check_normalization() -> CheckResult:
    t0 = time.perf_counter()
    worst = 0.0
    for i, (hidden, n_out, T, K) in enumerate([((), 2, 3, 1), ((3,), 2, 4, 2), ((), 3, 4, 3),
                                               ((2, 2), 1, 6, 1)]):
        net = EncoderNetwork(3, list(hidden), n_out, FilterParams(tau_e=4, num_kernels=K), seed=7 + i)
        net.readout.W *= 3
        x = (np.random.default_rng(i).random((3, T)) < 0.5).astype(float)
        total = sum(np.exp(sequence_log_prob(net, x, np.array(b).reshape(n_out, T)))
                    for b in itertools.product([0.0, 1.0], repeat=n_out * T))
        worst = max(worst, abs(total - 1.0))
    return CheckResult("normalization", worst <= NORM_ATOL, worst, NORM_ATOL,
                       time.perf_counter() - t0)


def oracle_instance(seed: int, hidden=()):
    """Tiny system + sample (at most 8 readout bits) with nontrivial parameters."""
    rs = np.random.default_rng(seed)
    n_in, n_out = int(rs.integers(2, 4)), int(rs.integers(1, 3))
    T = int(rs.integers(2, 8 // n_out + 1))
    K = int(rs.integers(1, 3))
    fp = FilterParams(tau_e=int(rs.integers(K, 5)), num_kernels=K)
    net = EncoderNetwork(n_in, list(hidden), n_out, fp, seed=seed)
    net.readout.W[...] = rs.normal(0, 1.5, net.readout.W.shape)
    net.readout.w_fb[:] = rs.normal(0, 1, n_out)
    net.readout.b[:] = rs.normal(0, 1, n_out)
    for layer in net.hidden:
        layer.W *= 4
        layer.b[:] = 0.2
    tau_d, n_cls = int(rs.integers(1, 3)), 3
    dec = DecoderModel.create("linear_softmax", "categorical", n_out * tau_d, n_cls)
    dec.params["W"] = rs.normal(0, 2, dec.params["W"].shape)
    dec.params["b"] = rs.normal(0, 1, n_cls)
    x = (rs.random((n_in, T)) < 0.6).astype(float)
    r = np.eye(n_cls)[:, rs.integers(n_cls, size=T)]
    mask = rs.random(T) < 0.8
    mask[-1] = True
    cfg = VdibConfig(beta=float(rs.uniform(0, 2)), prior_p=float(rs.uniform(0.1, 0.5)),
                     tau_e=fp.tau_e, tau_d=tau_d, T=T, update_mode="episodic")
    return VdibSystem(net, dec), LabeledSequence(x, r, mask, {}), cfg


def _fd_expected_loss(system, sample, cfg, h=1e-4) -> dict[str, np.ndarray]:
    """5-point stencil on the enumerated expected loss, readout parameters only.

    For a fixed readout train the decoder loss does not depend on readout
    parameters, so it is computed once and only log p(y||x) is re-evaluated.
    """
    net = system.encoder
    Y = list(all_readout_trains(net.n_readout, sample.x.shape[1]))
    D = np.array([run_episode(system, sample, cfg, None, learn=False, collect=False,
                              clamp=y).ell_dec for y in Y])
    logq = np.array([float(np.sum(log_bernoulli(y, cfg.prior_p))) for y in Y])

    def loss():
        lp = np.array([sequence_log_prob(net, sample.x, y) for y in Y])
        return float(np.sum(np.exp(lp) * (D + cfg.beta * (lp - logq))))

    params = net.readout.parameters()
    out = {}
    for name in ("W", "w_fb", "b"):
        arr = params[name]
        g = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            old = arr[idx]
            vals = []
            for step in (-2, -1, 1, 2):
                arr[idx] = old + step * h
                vals.append(loss())
            arr[idx] = old
            g[idx] = (vals[0] - 8 * vals[1] + 8 * vals[2] - vals[3]) / (12 * h)
        out[f"readout.{name}"] = g
    return out


def check_oracle(n_instances: int = 10) -> list[CheckResult]:
    t0 = time.perf_counter()
    grad_err = 0.0
    kl_err = 0.0
    kl_min = np.inf
    for s in range(n_instances):
        system, sample, cfg = oracle_instance(s, (2,) if s % 5 == 4 else ())
        exact = _fd_expected_loss(system, sample, cfg)
        res = enumerate_expected_loss(system, sample, cfg)
        for k, g in exact.items():
            grad_err = max(grad_err, np.abs(res.expected_estimate[k] - g).max())
        kl_err = max(kl_err, abs(res.expected_ell_enc - res.kl))
        kl_min = min(kl_min, res.kl, res.expected_ell_enc)
    dt = time.perf_counter() - t0
    return [
        CheckResult("reinforce_unbiased", grad_err <= ORACLE_ATOL, grad_err, ORACLE_ATOL, dt),
        CheckResult("encoder_loss_equals_kl", kl_err <= KL_ATOL and kl_min >= 0.0, kl_err,
                    KL_ATOL, 0.0, f"min KL {kl_min:.3e}"),
    ]


def gradcheck(scope: str = "all", eligibility=readout_eligibility) -> GradcheckReport:
    """Run the checks in ``scope``; ``eligibility`` replaces the readout formula under test."""
    if scope not in SCOPES:
        raise ConfigError(f"unknown gradcheck scope {scope!r}; expected one of {SCOPES}")
    report = GradcheckReport()
    if scope in ("all", "readout"):
        report.results.append(check_readout(eligibility=eligibility))
        report.results.append(check_normalization())
    if scope in ("all", "decoder"):
        report.results.extend(check_decoder())
    if scope in ("all", "oracle"):
        report.results.extend(check_oracle())
    return report
