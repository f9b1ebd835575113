"""Numerical primitives: activations, surrogates, causal filters, sampling.

Everything works on float64 numpy arrays or Python floats.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit

from .errors import ConfigError, ContractViolation

PROB_EPS = 1e-7
LOG_EPS = float(np.log(PROB_EPS))
LOG_1M_EPS = float(np.log1p(-PROB_EPS))

SURROGATES = ("sigmoid_prime",)


class Rng:
    """Seeded random stream.

    ``(seed, stream_id)`` fully determines the draw sequence; different
    ``stream_id`` values give independent streams (numpy ``SeedSequence``
    spawn keys over PCG64).
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def spawn(self, stream_id: int) -> "Rng":
        return Rng(self.seed, stream_id)

    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def bernoulli(self, prob: np.ndarray) -> np.ndarray:
        """Independent Bernoulli draws, one per entry of ``prob``."""
        prob = np.asarray(prob, dtype=np.float64)
        return (self.gen.random(prob.shape) < prob).astype(np.float64)

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream_id={self.stream_id})"


def sigmoid(x):
    """Logistic function, overflow-free for any finite input."""
    out = expit(np.asarray(x, dtype=np.float64))
    return out if out.ndim else float(out)


def log_sigmoid(x):
    out = log_expit(np.asarray(x, dtype=np.float64))
    return out if out.ndim else float(out)


def surrogate_derivative(x, kind: str = "sigmoid_prime"):
    """Pseudo-derivative of the Heaviside step used by hidden neurons."""
    if kind != "sigmoid_prime":
        raise ConfigError(f"unknown surrogate kind {kind!r}; expected one of {SURROGATES}")
    s = sigmoid(x)
    return s * (1.0 - s)


def clamp_prob(p):
    return np.clip(p, PROB_EPS, 1.0 - PROB_EPS)


def log_bernoulli(y, prob):
    """y*log(prob) + (1-y)*log(1-prob) with prob clamped away from {0, 1}."""
    p = clamp_prob(np.asarray(prob, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    out = y * np.log(p) + (1.0 - y) * np.log1p(-p)
    return out if out.ndim else float(out)


def log_bernoulli_logit(y, u):
    """log Bern(y | sigmoid(u)), using log-space clamping at the same bounds.

    Equal to ``log_bernoulli(y, sigmoid(u))`` but keeps precision when
    ``sigmoid(u)`` rounds to 1.
    """
    y = np.asarray(y, dtype=np.float64)
    lp1 = np.clip(log_sigmoid(u), LOG_EPS, LOG_1M_EPS)
    lp0 = np.clip(log_sigmoid(-np.asarray(u, dtype=np.float64)), LOG_EPS, LOG_1M_EPS)
    out = y * lp1 + (1.0 - y) * lp0
    return out if out.ndim else float(out)


def softmax(v):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ContractViolation("softmax of an empty vector")
    z = np.exp(v - v.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def log_softmax(v):
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ContractViolation("log_softmax of an empty vector")
    shifted = v - v.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def bernoulli_sample(rng: Rng, prob: float) -> int:
    if not 0.0 <= prob <= 1.0:
        raise ContractViolation(f"probability {prob} outside [0, 1]")
    return int(rng.random() < prob)


@dataclass
class CausalFilter:
    """Kernel f_0..f_memory of a causal convolution; taps past ``memory`` are zero."""

    taps: np.ndarray

    def __post_init__(self):
        self.taps = np.asarray(self.taps, dtype=np.float64).ravel()
        if self.taps.size == 0:
            raise ContractViolation("a causal filter needs at least one tap")

    @property
    def memory(self) -> int:
        return self.taps.size - 1

    def __getitem__(self, delay: int) -> float:
        if delay < 0 or delay > self.memory:
            return 0.0
        return float(self.taps[delay])


def causal_convolve(filt: CausalFilter, signal, t: int) -> float:
    """sum_{d=0}^{min(memory, t-1)} f_d * g_{t-d}, with 1-based time ``t``.

    Samples before the start of ``signal`` count as zero.
    """
    g = np.asarray(signal, dtype=np.float64)
    if not 1 <= t <= g.shape[0]:
        raise ContractViolation(f"t={t} outside 1..{g.shape[0]}")
    n = min(filt.memory, t - 1) + 1
    # g_{t-d} for d = 0..n-1 lives at 0-based index t-1-d
    window = g[t - n:t][::-1]
    return float(np.dot(filt.taps[:n], window))


def causal_convolve_all(filt: CausalFilter, signal) -> np.ndarray:
    """``causal_convolve`` at every t = 1..T along the first axis."""
    g = np.asarray(signal, dtype=np.float64)
    T = g.shape[0]
    out = np.zeros_like(g)
    for d in range(min(filt.memory, T - 1) + 1):
        if filt.taps[d] != 0.0:
            out[d:] += filt.taps[d] * g[:T - d]
    return out
