"""Drifting Gaussian blobs on a ring of input units.

Each blob's continuous position theta follows an AR(2) walk; its integer
position p_t drives both the input spikes and the pair-class reference.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import ConfigError, ContractViolation
from ..mathcore import Rng

POSITION_MODES = ("round", "sample")


@dataclass(frozen=True)
class BlobProcessParams:
    n_positions: int = 20
    n_blobs: int = 2
    sigma: float = 0.45
    a: float = 0.9
    b: float = 0.14
    delta: int = 0
    position_mode: str = "round"

    def __post_init__(self):
        if self.n_positions < 2:
            raise ConfigError(f"n_positions must be >= 2, got {self.n_positions}")
        if self.n_blobs not in (1, 2):
            # the reference is a pair class, so at most two blobs
            raise ConfigError(f"n_blobs must be 1 or 2, got {self.n_blobs}")
        if not self.sigma > 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if not abs(self.a) < 1:
            raise ConfigError(f"|a| must be < 1 for a stationary velocity, got a={self.a}")
        if int(self.delta) != self.delta:
            raise ConfigError(f"delta must be an integer, got {self.delta}")
        if self.position_mode not in POSITION_MODES:
            raise ConfigError(f"position_mode must be one of {POSITION_MODES}")

    @property
    def n_classes(self) -> int:
        n = self.n_positions
        return n * (n + 1) // 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LabeledSequence:
    """Input spikes x (N_X x T), reference r (N_R x T) and the defined-step mask."""

    x: np.ndarray
    r: np.ndarray
    mask: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.x.ndim != 2 or self.r.ndim != 2:
            raise ContractViolation("x and r must be 2-D (units x time)")
        T = self.x.shape[1]
        if self.r.shape[1] != T or self.mask.shape != (T,):
            raise ContractViolation(
                f"x spans T={T} but r spans {self.r.shape[1]} and mask {self.mask.shape}")

    @property
    def T(self) -> int:
        return self.x.shape[1]


def pair_index(p1: int, p2: int, n: int) -> int:
    """Index of the unordered pair {p1, p2} (positions 1..n, repeats allowed).

    Pairs are ordered lexicographically by (min, max): {1,1}, {1,2}, ..., {1,n},
    {2,2}, ..., {n,n}.
    """
    if not (1 <= p1 <= n and 1 <= p2 <= n):
        raise ContractViolation(f"positions ({p1}, {p2}) outside 1..{n}")
    lo, hi = (p1, p2) if p1 <= p2 else (p2, p1)
    lo -= 1
    hi -= 1
    return int(lo * n - lo * (lo - 1) // 2 + (hi - lo))


def wrap_position(theta, n: int) -> np.ndarray:
    """Round (half to even) and wrap into 1..n."""
    return (np.rint(theta).astype(np.int64) - 1) % n + 1


def wrapped_distance(i, p, n: int) -> np.ndarray:
    d = np.abs(np.asarray(i) - np.asarray(p)) % n
    return np.minimum(d, n - d)


def simulate_positions(rng: Rng, params: BlobProcessParams, T: int) -> np.ndarray:
    """Continuous blob positions theta_1..theta_T, shape (n_blobs, T)."""
    theta = rng.integers(1, params.n_positions + 1, size=params.n_blobs).astype(np.float64)
    eps = rng.normal(size=(params.n_blobs, T))
    v = np.zeros(params.n_blobs)
    out = np.empty((params.n_blobs, T))
    for t in range(T):
        v = params.a * v - params.b * eps[:, t]
        theta = theta + v
        out[:, t] = theta
    return out


def gen_blob_sequence(rng: Rng, params: BlobProcessParams, T: int) -> LabeledSequence:
    if T < 1:
        raise ContractViolation(f"T must be >= 1, got {T}")
    n = params.n_positions
    theta = simulate_positions(rng, params, T)
    if params.position_mode == "sample":
        theta = theta + params.sigma * rng.normal(size=theta.shape)
    pos = wrap_position(theta, n)  # (n_blobs, T), values in 1..n

    units = np.arange(1, n + 1)
    d = wrapped_distance(units[None, :, None], pos[:, None, :], n)  # blobs x units x T
    prob = np.exp(-(d ** 2) / (2.0 * params.sigma ** 2)).max(axis=0)
    x = (rng.random(prob.shape) < prob).astype(np.float64)

    classes = np.full(T, -1, dtype=np.int64)
    for t in range(T):
        s = t + params.delta
        if 0 <= s < T:
            p = pos[:, s]
            classes[t] = pair_index(int(p[0]), int(p[-1]), n)
    mask = classes >= 0
    r = np.zeros((params.n_classes, T))
    r[classes[mask], np.flatnonzero(mask)] = 1.0
    return LabeledSequence(x, r, mask, {"positions": pos, "theta": theta, "classes": classes})


def blob_stream(rng: Rng, params: BlobProcessParams, T: int, n: int | None = None):
    """Yield fresh sequences forever (or ``n`` of them)."""
    i = 0
    while n is None or i < n:
        yield gen_blob_sequence(rng, params, T)
        i += 1
