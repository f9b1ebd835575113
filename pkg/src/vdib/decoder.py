"""Windowed feed-forward decoders with hand-written backprop.

Feature layout of a window: slot-major, oldest slot first, so feature
``s * n_units + i`` is unit ``i`` at slot ``s`` (slot ``capacity - 1`` is the
newest sample).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractViolation
from .mathcore import LOG_1M_EPS, LOG_EPS, Rng, log_sigmoid, log_softmax, sigmoid

KINDS = ("linear_softmax", "mlp")
LIKELIHOODS = ("categorical", "bernoulli_pixel", "gaussian_unit")
DECODINGS = ("time", "rate")


class WindowBuffer:
    """The last ``capacity`` readout vectors, zero-padded before the first push."""

    def __init__(self, n_units: int, capacity: int):
        if capacity < 1:
            raise ConfigError(f"window capacity must be >= 1, got {capacity}")
        self.n_units = n_units
        self.capacity = capacity
        self.data = np.zeros((capacity, n_units))
        self.count = 0

    def reset(self):
        self.data[:] = 0.0
        self.count = 0

    def push(self, y_t) -> "WindowBuffer":
        y_t = np.asarray(y_t, dtype=np.float64)
        if y_t.shape != (self.n_units,):
            raise ContractViolation(f"pushed vector of shape {y_t.shape}, expected ({self.n_units},)")
        self.data[:-1] = self.data[1:]
        self.data[-1] = y_t
        self.count += 1
        return self

    def features(self) -> np.ndarray:
        return self.data.reshape(-1).copy()


def window_push(buf: WindowBuffer, y_t) -> WindowBuffer:
    return buf.push(y_t)


def rate_pool(buf: WindowBuffer) -> np.ndarray:
    """Per-unit spike count over the window (rate-decoding features)."""
    return buf.data.sum(axis=0)


def window_features(buf: WindowBuffer, decoding: str) -> np.ndarray:
    if decoding == "time":
        return buf.features()
    if decoding == "rate":
        return rate_pool(buf)
    raise ConfigError(f"unknown decoding {decoding!r}; expected one of {DECODINGS}")


def feature_size(n_units: int, tau_d: int, decoding: str) -> int:
    return n_units * tau_d if decoding == "time" else n_units


@dataclass
class DecoderModel:
    kind: str
    likelihood: str
    n_in: int
    n_out: int
    hidden_size: int = 0
    params: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown decoder kind {self.kind!r}; expected one of {KINDS}")
        if self.likelihood not in LIKELIHOODS:
            raise ConfigError(f"unknown likelihood {self.likelihood!r}; expected one of {LIKELIHOODS}")
        if self.kind == "mlp" and self.hidden_size < 1:
            raise ConfigError("mlp decoder needs hidden_size >= 1")

    @classmethod
    def create(cls, kind: str, likelihood: str, n_in: int, n_out: int, seed: int = 0,
               hidden_size: int | None = None) -> "DecoderModel":
        """Linear models start at zero (uniform output); MLPs get uniform fan-in init."""
        if kind == "mlp" and hidden_size is None:
            hidden_size = max(1, n_in // 2)
        model = cls(kind, likelihood, n_in, n_out, hidden_size or 0)
        if kind == "linear_softmax":
            model.params = {"W": np.zeros((n_out, n_in)), "b": np.zeros(n_out)}
        else:
            rng = Rng(seed, stream_id=1)
            c1 = np.sqrt(1.0 / n_in)
            c2 = np.sqrt(1.0 / model.hidden_size)
            model.params = {
                "W1": rng.uniform(-c1, c1, (model.hidden_size, n_in)),
                "b1": np.zeros(model.hidden_size),
                "W2": rng.uniform(-c2, c2, (n_out, model.hidden_size)),
                "b2": np.zeros(n_out),
            }
        return model

    def copy(self) -> "DecoderModel":
        return DecoderModel(self.kind, self.likelihood, self.n_in, self.n_out, self.hidden_size,
                            {k: v.copy() for k, v in self.params.items()})


def _check_features(model: DecoderModel, features) -> np.ndarray:
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != model.n_in:
        raise ContractViolation(f"feature length {f.shape[-1]} != decoder input size {model.n_in}")
    return f


def decoder_forward(model: DecoderModel, features) -> np.ndarray:
    """Output parameters: logits (categorical / bernoulli) or means (gaussian).

    Accepts a single feature vector or a batch (rows).
    """
    return _forward(model, _check_features(model, features))[0]


def _forward(model, f):
    p = model.params
    if model.kind == "linear_softmax":
        return f @ p["W"].T + p["b"], None
    h_pre = f @ p["W1"].T + p["b1"]
    h = np.maximum(h_pre, 0.0)
    return h @ p["W2"].T + p["b2"], (h_pre, h)


def predict_mean(model: DecoderModel, features) -> np.ndarray:
    """Expected reference under the decoder: class probabilities, pixel means or means."""
    out = decoder_forward(model, features)
    if model.likelihood == "categorical":
        return np.exp(log_softmax(out))
    if model.likelihood == "bernoulli_pixel":
        return sigmoid(out)
    return out


def _check_target(r, likelihood: str, n_out: int) -> np.ndarray:
    if likelihood == "categorical" and np.ndim(r) == 0:
        c = int(r)
        if not 0 <= c < n_out:
            raise ContractViolation(f"class index {c} outside 0..{n_out - 1}")
        onehot = np.zeros(n_out)
        onehot[c] = 1.0
        return onehot
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (n_out,):
        raise ContractViolation(f"target of shape {r.shape}, expected ({n_out},)")
    if likelihood == "categorical":
        if not (np.all((r == 0.0) | (r == 1.0)) and r.sum() == 1.0):
            raise ContractViolation("categorical target must be one-hot")
    elif likelihood == "bernoulli_pixel":
        if np.any(r < 0.0) or np.any(r > 1.0) or not np.all(np.isfinite(r)):
            raise ContractViolation("bernoulli_pixel target must lie in [0, 1]")
    elif not np.all(np.isfinite(r)):
        raise ContractViolation("gaussian target must be finite")
    return r


def _loss_and_output_grad(out, r, likelihood):
    """Loss value and d loss / d output for a single output vector."""
    if likelihood == "categorical":
        logp = log_softmax(out)
        c = int(np.argmax(r))
        if logp[c] <= LOG_EPS:
            return -LOG_EPS, np.zeros_like(out)
        grad = np.exp(logp)
        grad[c] -= 1.0
        return float(-logp[c]), grad
    if likelihood == "bernoulli_pixel":
        raw1 = log_sigmoid(out)
        raw0 = log_sigmoid(-out)
        lp1 = np.clip(raw1, LOG_EPS, LOG_1M_EPS)
        lp0 = np.clip(raw0, LOG_EPS, LOG_1M_EPS)
        live1 = (raw1 > LOG_EPS) & (raw1 < LOG_1M_EPS)
        live0 = (raw0 > LOG_EPS) & (raw0 < LOG_1M_EPS)
        s = sigmoid(out)
        loss = -float(np.sum(r * lp1 + (1.0 - r) * lp0))
        grad = -r * (1.0 - s) * live1 + (1.0 - r) * s * live0
        return loss, grad
    diff = out - r
    return 0.5 * float(diff @ diff), diff


def decoder_logloss(out, r, likelihood: str) -> float:
    """-log q(r_t | window) given the decoder output (gaussian drops 0.5*log(2*pi) per dim)."""
    out = np.asarray(out, dtype=np.float64)
    if likelihood not in LIKELIHOODS:
        raise ConfigError(f"unknown likelihood {likelihood!r}")
    r = _check_target(r, likelihood, out.shape[-1])
    return _loss_and_output_grad(out, r, likelihood)[0]


def decoder_backprop(model: DecoderModel, features, r) -> tuple[dict[str, np.ndarray], float]:
    f = _check_features(model, features)
    r = _check_target(r, model.likelihood, model.n_out)
    out, cache = _forward(model, f)
    loss, g = _loss_and_output_grad(out, r, model.likelihood)
    return _param_grads(model, f, cache, g), loss


def _param_grads(model, f, cache, g):
    """Chain the output gradient ``g`` back to every parameter."""
    if model.kind == "linear_softmax":
        return {"W": np.outer(g, f), "b": g}
    h_pre, h = cache
    dh = (model.params["W2"].T @ g) * (h_pre > 0.0)
    return {"W1": np.outer(dh, f), "b1": dh, "W2": np.outer(g, h), "b2": g}


def apply_decoder_update(model: DecoderModel, grads: dict[str, np.ndarray], eta: float):
    if eta == 0.0:
        return
    for k, g in grads.items():
        model.params[k] -= eta * g
