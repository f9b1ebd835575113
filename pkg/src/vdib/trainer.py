"""Joint training of the spiking encoder and the decoder.

The encoder follows a REINFORCE rule: a scalar learning signal
``ell_dec + beta * ell_enc`` (optionally centred by a moving-average
baseline) multiplies local eligibilities, with hidden neurons receiving
per-neuron feedback-alignment signals. The decoder is trained by plain SGD
on its log-loss.

``update_mode="online"`` updates both networks at every time step;
``"episodic"`` accumulates over the sequence and applies one update, which
is an unbiased single-sample estimate of the sequence-level gradient.
"""

from __future__ import annotations

import csv
import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .decoder import (
    DecoderModel,
    WindowBuffer,
    _check_target,
    _forward,
    _loss_and_output_grad,
    _param_grads,
    apply_decoder_update,
    window_features,
)
from .encoder import HIDDEN, EligibilitySet, EncoderNetwork, sequence_log_prob
from .errors import ConfigError, ContractViolation
from .mathcore import Rng, log_bernoulli, sigmoid, softmax

log = logging.getLogger(__name__)

UPDATE_MODES = ("online", "episodic")
METRIC_FIELDS = ("iter", "ell_dec", "ell_enc", "spike_rate_readout", "spike_rate_hidden",
                 "task_metric")


@dataclass
class VdibConfig:
    beta: float = 1.0
    eta: float = 1e-2
    kappa: float = 0.0
    prior_p: float = 0.2
    tau_e: int = 5
    tau_d: int = 5
    T: int = 100
    update_mode: str = "online"
    eta_encoder: float | None = None
    eta_decoder: float | None = None
    clip: float | None = 100.0
    seed: int = 0

    def __post_init__(self):
        if not self.beta >= 0:
            raise ConfigError(f"beta must be >= 0, got {self.beta}")
        if not self.eta >= 0:
            raise ConfigError(f"eta must be >= 0, got {self.eta}")
        for name in ("eta_encoder", "eta_decoder"):
            v = getattr(self, name)
            if v is not None and not v >= 0:
                raise ConfigError(f"{name} must be >= 0, got {v}")
        if not 0.0 <= self.kappa < 1.0:
            raise ConfigError(f"kappa must lie in [0, 1), got {self.kappa}")
        if not 0.0 < self.prior_p < 1.0:
            raise ConfigError(f"prior_p must lie in (0, 1), got {self.prior_p}")
        for name in ("tau_e", "tau_d", "T"):
            if int(getattr(self, name)) != getattr(self, name) or getattr(self, name) < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {getattr(self, name)}")
        if self.update_mode not in UPDATE_MODES:
            raise ConfigError(f"update_mode must be one of {UPDATE_MODES}, got {self.update_mode!r}")
        if self.clip is not None and not self.clip > 0:
            raise ConfigError(f"clip must be positive or None, got {self.clip}")

    @property
    def lr_encoder(self) -> float:
        return self.eta if self.eta_encoder is None else self.eta_encoder

    @property
    def lr_decoder(self) -> float:
        return self.eta if self.eta_decoder is None else self.eta_decoder


@dataclass
class StepLosses:
    ell_dec: float
    ell_enc: float
    global_signal: float


@dataclass
class VdibSystem:
    """Encoder + decoder + the small amount of state shared between steps."""

    encoder: EncoderNetwork
    decoder: DecoderModel
    decoding: str = "time"
    baseline: float = 0.0
    clip_events: int = 0

    def __post_init__(self):
        window_features(WindowBuffer(1, 1), self.decoding)  # validates the mode

    def new_window(self, tau_d: int) -> WindowBuffer:
        return WindowBuffer(self.encoder.n_readout, tau_d)


class MetricLog:
    """Append-only metric rows with a fixed CSV schema."""

    def __init__(self):
        self.rows: list[dict] = []

    def append(self, row: dict):
        self.rows.append({k: row[k] for k in METRIC_FIELDS})

    def __len__(self):
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_FIELDS)
            for r in self.rows:
                w.writerow([r["iter"]] + [repr(float(r[k])) for k in METRIC_FIELDS[1:]])

    @classmethod
    def from_csv(cls, path) -> "MetricLog":
        out = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                out.append({k: (int(v) if k == "iter" else float(v)) for k, v in r.items()})
        return out


def encoder_loss_step(readout_logprobs, y_t, prior_p: float) -> float:
    """sum_i [log p(y_i,t | history) - log q(y_i,t)] for a Bernoulli(prior_p) reference."""
    return float(np.sum(np.asarray(readout_logprobs) - log_bernoulli(y_t, prior_p)))


def global_learning_signal(ell_dec: float, ell_enc: float, beta: float, kappa: float,
                           baseline: float = 0.0) -> tuple[float, float]:
    """Return (signal, updated baseline).

    With kappa > 0 the signal is centred by the moving average of previous raw
    signals; the baseline is refreshed after it is used.
    """
    raw = ell_dec + beta * ell_enc
    if kappa == 0.0:
        return raw, baseline
    signal = raw - baseline
    return signal, kappa * baseline + (1.0 - kappa) * raw


def _clip(signal: float, cfg: VdibConfig, system: VdibSystem) -> float:
    if cfg.clip is not None and abs(signal) > cfg.clip:
        system.clip_events += 1
        log.debug("learning signal %.3g clipped to +-%g", signal, cfg.clip)
        return float(np.clip(signal, -cfg.clip, cfg.clip))
    return signal


class DeltaAccumulator:
    """Sums per-step encoder update directions without materialising each step."""

    def __init__(self, net: EncoderNetwork):
        self.net = net
        n = len(net.layers)
        self.posts: list[list[np.ndarray]] = [[] for _ in range(n)]
        self.pres: list[list[np.ndarray]] = [[] for _ in range(n)]
        self.fb = [np.zeros(l.n_post) for l in net.layers]
        self.bias = [np.zeros(l.n_post) for l in net.layers]

    def add(self, deltas: list[EligibilitySet]):
        for l, d in enumerate(deltas):
            self.posts[l].append(d.post)
            self.pres[l].append(d.pre)
            self.fb[l] += d.feedback
            self.bias[l] += d.bias

    def gradients(self) -> dict[str, np.ndarray]:
        out = {}
        for l, (name, layer) in enumerate(zip(self.net.layer_names(), self.net.layers)):
            if self.posts[l]:
                post = np.stack(self.posts[l])
                pre = np.stack(self.pres[l])
                if layer.kind == HIDDEN:
                    W = post.T @ pre
                else:
                    W = np.einsum("ti,tjk->ijk", post, pre)
            else:
                W = np.zeros_like(layer.W)
            out[f"{name}.W"] = W
            out[f"{name}.w_fb"] = self.fb[l].copy()
            out[f"{name}.b"] = self.bias[l].copy()
        return out


def apply_encoder_update(net: EncoderNetwork, deltas, signal: float, eta: float,
                         mode: str = "online", accumulator: DeltaAccumulator | None = None):
    """Online: w <- w - eta * signal * delta_t now. Episodic: add delta_t to ``accumulator``."""
    if mode == "online":
        net.apply_update(deltas, eta * signal)
    elif mode == "episodic":
        if accumulator is None:
            raise ContractViolation("episodic updates need an accumulator")
        accumulator.add(deltas)
    else:
        raise ConfigError(f"unknown update mode {mode!r}")


@dataclass
class Episode:
    """Everything a single pass over one sample produced."""

    ell_dec: float = 0.0  # summed over defined steps
    ell_enc: float = 0.0  # summed over all steps
    n_defined: int = 0
    readout_spikes: float = 0.0
    hidden_spikes: float = 0.0
    task_sq_error: float = 0.0
    y: np.ndarray | None = None
    encoder_grads: dict | None = None
    decoder_grads: dict | None = None
    prediction: np.ndarray | None = None  # decoder mean at the last defined step
    signal: float = 0.0


def _prediction(model: DecoderModel, out) -> np.ndarray:
    if model.likelihood == "categorical":
        return softmax(out)
    if model.likelihood == "bernoulli_pixel":
        return sigmoid(out)
    return out


def run_episode(system: VdibSystem, sample, cfg: VdibConfig, rng: Rng | None,
                learn: bool = True, collect: bool | None = None, clamp=None) -> Episode:
    """One pass over ``sample`` (x, r, mask).

    ``learn`` applies the online updates (only meaningful in online mode).
    ``collect`` accumulates the summed encoder/decoder update directions on
    the returned episode; it defaults to ``update_mode == "episodic"``.
    ``clamp`` replays a given readout train instead of sampling.
    """
    x, r, mask = sample.x, sample.r, sample.mask
    net, dec = system.encoder, system.decoder
    T = x.shape[1]
    if x.shape[0] != net.n_inputs:
        raise ContractViolation(f"sample has {x.shape[0]} input units, encoder expects {net.n_inputs}")
    if r.shape[1] != T or mask.shape != (T,):
        raise ContractViolation("reference and mask must span the same T as the input")
    if r.shape[0] != dec.n_out:
        raise ContractViolation(f"reference has {r.shape[0]} rows, decoder outputs {dec.n_out}")
    if collect is None:
        collect = cfg.update_mode == "episodic"
    online = learn and cfg.update_mode == "online"
    need_grads = online or collect
    acc = DeltaAccumulator(net) if collect else None
    dec_grad_sum = None
    eta_e, eta_d = cfg.lr_encoder, cfg.lr_decoder

    net.reset()
    window = system.new_window(cfg.tau_d)
    ep = Episode()
    ys = np.zeros((net.n_readout, T))
    for t in range(T):
        out = net.forward_step(x[:, t], rng, None if clamp is None else clamp[:, t])
        ys[:, t] = out.y
        ell_enc = encoder_loss_step(out.logprob, out.y, cfg.prior_p)
        ep.ell_enc += ell_enc
        ep.readout_spikes += float(out.y.sum())
        for z in out.hidden_spikes:
            ep.hidden_spikes += float(z.sum())
        window.push(out.y)
        ell_dec = 0.0
        dgrads = None
        if mask[t]:
            feats = window_features(window, system.decoding)
            target = _check_target(r[:, t], dec.likelihood, dec.n_out)
            o, cache = _forward(dec, feats)
            ell_dec, g = _loss_and_output_grad(o, target, dec.likelihood)
            if need_grads:
                dgrads = _param_grads(dec, feats, cache, g)
            ep.prediction = _prediction(dec, o)
            ep.task_sq_error += float(np.mean((ep.prediction - target) ** 2))
            ep.ell_dec += ell_dec
            ep.n_defined += 1
        if online:
            signal, system.baseline = global_learning_signal(ell_dec, ell_enc, cfg.beta, cfg.kappa,
                                                             system.baseline)
            signal = _clip(signal, cfg, system)
            apply_encoder_update(net, out.deltas, signal, eta_e, "online")
            if dgrads is not None:
                apply_decoder_update(dec, dgrads, eta_d)
        elif collect:
            apply_encoder_update(net, out.deltas, 0.0, eta_e, "episodic", acc)
            if dgrads is not None:
                if dec_grad_sum is None:
                    dec_grad_sum = {k: v.copy() for k, v in dgrads.items()}
                else:
                    for k in dec_grad_sum:
                        dec_grad_sum[k] += dgrads[k]
    ep.y = ys
    if acc is not None:
        ep.encoder_grads = acc.gradients()
        ep.decoder_grads = dec_grad_sum
    return ep


def episodic_estimate(system: VdibSystem, sample, cfg: VdibConfig, rng: Rng | None = None,
                      clamp=None) -> tuple[dict[str, np.ndarray], Episode]:
    """Single-sample REINFORCE estimate of the encoder gradient.

    (ell_dec + beta * ell_enc) * grad log p(y || x) for one sampled (or
    clamped) readout train, without touching any weights.
    """
    ep = run_episode(system, sample, cfg, rng, learn=False, collect=True, clamp=clamp)
    total = ep.ell_dec + cfg.beta * ep.ell_enc
    return {k: total * g for k, g in ep.encoder_grads.items()}, ep


def train_step(system: VdibSystem, sample, cfg: VdibConfig, rng: Rng,
               iteration: int = 0) -> tuple[StepLosses, dict]:
    """Run one sample through the system and update both networks."""
    ep = run_episode(system, sample, cfg, rng, learn=True)
    signal = float("nan")
    if cfg.update_mode == "episodic":
        signal, system.baseline = global_learning_signal(ep.ell_dec, ep.ell_enc, cfg.beta,
                                                         cfg.kappa, system.baseline)
        signal = _clip(signal, cfg, system)
        if signal != 0.0 and cfg.lr_encoder != 0.0:
            system.encoder.apply_gradients(ep.encoder_grads, cfg.lr_encoder * signal)
        if ep.decoder_grads is not None:
            apply_decoder_update(system.decoder, ep.decoder_grads, cfg.lr_decoder)
    T = sample.x.shape[1]
    n_hidden = sum(system.encoder.hidden_sizes)
    nd = max(ep.n_defined, 1)
    losses = StepLosses(ep.ell_dec / nd, ep.ell_enc / T, signal)
    row = {
        "iter": iteration,
        "ell_dec": ep.ell_dec / nd,
        "ell_enc": ep.ell_enc / T,
        "spike_rate_readout": ep.readout_spikes / (system.encoder.n_readout * T),
        "spike_rate_hidden": ep.hidden_spikes / (n_hidden * T) if n_hidden else 0.0,
        "task_metric": ep.task_sq_error / nd,
    }
    return losses, row


def _mean_rows(rows: list[dict], iteration: int) -> dict:
    out = {"iter": iteration}
    for k in METRIC_FIELDS[1:]:
        out[k] = float(np.mean([r[k] for r in rows]))
    return out


def train(system: VdibSystem, dataset: Iterable, cfg: VdibConfig, rng: Rng,
          n_iterations: int | None = None, log_every: int = 1, checkpoint_every: int | None = None,
          on_checkpoint=None, progress=None) -> MetricLog:
    """Iterate :func:`train_step` over ``dataset``.

    One metric row is written per ``log_every`` iterations (averaged over the
    interval). ``on_checkpoint(iteration, system)`` fires every
    ``checkpoint_every`` iterations.
    """
    if log_every < 1:
        raise ConfigError("log_every must be >= 1")
    metrics = MetricLog()
    pending: list[dict] = []
    it = iter(dataset)
    if n_iterations is not None:
        it = itertools.islice(it, n_iterations)
    i = 0
    for i, sample in enumerate(it, start=1):
        _, row = train_step(system, sample, cfg, rng, i)
        pending.append(row)
        if i % log_every == 0:
            metrics.append(_mean_rows(pending, i))
            pending = []
        if checkpoint_every and on_checkpoint is not None and i % checkpoint_every == 0:
            on_checkpoint(i, system)
        if progress is not None:
            progress(i)
    if pending:
        metrics.append(_mean_rows(pending, i))
    return metrics


def spike_rate(train) -> float:
    a = np.asarray(train, dtype=np.float64)
    if a.size == 0:
        raise ContractViolation("spike rate of an empty train")
    return float(a.mean())


# ---------------------------------------------------------------------------
# Enumeration oracles (tiny instances only)
# ---------------------------------------------------------------------------

MAX_ENUM_BITS = 12


def all_readout_trains(n_readout: int, T: int):
    """Every binary (n_readout x T) train, in a fixed order."""
    bits = n_readout * T
    if bits > MAX_ENUM_BITS:
        raise ContractViolation(f"{bits} readout bits is too many to enumerate (max {MAX_ENUM_BITS})")
    for code in range(2 ** bits):
        flat = [(code >> k) & 1 for k in range(bits)]
        yield np.array(flat, dtype=np.float64).reshape(n_readout, T)


@dataclass
class EnumerationResult:
    expected_loss: float
    gradients: dict[str, np.ndarray]
    expected_estimate: dict[str, np.ndarray]
    kl: float
    expected_ell_enc: float
    total_probability: float
    log_probs: np.ndarray = field(repr=False, default=None)


def enumerate_expected_loss(system: VdibSystem, sample, cfg: VdibConfig) -> EnumerationResult:
    """Exact VDIB loss and its readout gradient by summing over every readout train.

    Gradients use the score-function identity
    grad E[f] = E[f * grad log p] + beta * E[grad log p]
    with grad log p(y||x) = sum_t e_t (exact for readout parameters). Also
    returns the expectation of the per-sample episodic estimate (the first
    term only), the exact KL to the Bernoulli reference, and the expectation
    of the per-step encoder loss accumulated along the training path.
    """
    net = system.encoder
    T = sample.x.shape[1]
    loss = 0.0
    kl = 0.0
    enc_mean = 0.0
    total_p = 0.0
    grads: dict[str, np.ndarray] = {}
    est: dict[str, np.ndarray] = {}
    logps = []
    for y in all_readout_trains(net.n_readout, T):
        ep = run_episode(system, sample, cfg, None, learn=False, collect=True, clamp=y)
        # log p(y||x) and log q(y) re-evaluated outside the training path
        logp = sequence_log_prob(net, sample.x, y)
        logq = float(np.sum(log_bernoulli(y, cfg.prior_p)))
        p = float(np.exp(logp))
        logps.append(logp)
        total_p += p
        f = ep.ell_dec + cfg.beta * (logp - logq)
        loss += p * f
        kl += p * (logp - logq)
        enc_mean += p * ep.ell_enc
        for k, g in ep.encoder_grads.items():
            if not k.startswith("readout."):
                continue
            grads[k] = grads.get(k, 0.0) + p * (f + cfg.beta) * g
            est[k] = est.get(k, 0.0) + p * (ep.ell_dec + cfg.beta * ep.ell_enc) * g
    return EnumerationResult(loss, grads, est, kl, enc_mean, total_p, np.array(logps))
