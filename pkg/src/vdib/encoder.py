"""Spiking encoder: deterministic SRM hidden layers and a stochastic readout.

Timing convention: every kernel has a zero tap at delay 0, so a spike
emitted at step t first moves membrane potentials at step t+1.

Hidden layers propagate their synaptic and refractory traces with the
second/first order autoregressive recursions (infinite memory). The readout
layer keeps a ring buffer of the last ``tau_e`` pre-synaptic and own spikes
and applies explicit truncated kernels, which lets it carry ``num_kernels``
delayed alpha kernels per synapse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg.blas import dger

from .errors import ConfigError, ContractViolation
from .mathcore import (
    CausalFilter,
    Rng,
    log_bernoulli_logit,
    sigmoid,
    surrogate_derivative,
)

HIDDEN = "hidden_deterministic"
READOUT = "readout_stochastic"


@dataclass(frozen=True)
class FilterParams:
    tau_mem: float = 20.0
    tau_syn: float = 5.0
    tau_ref: float = 10.0
    tau_e: int = 5
    num_kernels: int = 1

    def __post_init__(self):
        for name in ("tau_mem", "tau_syn", "tau_ref"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.tau_mem == self.tau_syn:
            raise ConfigError("tau_mem == tau_syn makes the alpha kernel vanish")
        if int(self.tau_e) != self.tau_e or self.tau_e < 1:
            raise ConfigError(f"tau_e must be an integer >= 1, got {self.tau_e}")
        if int(self.num_kernels) != self.num_kernels or self.num_kernels < 1:
            raise ConfigError(f"num_kernels must be an integer >= 1, got {self.num_kernels}")
        if self.num_kernels > self.tau_e:
            raise ConfigError(
                f"num_kernels={self.num_kernels} exceeds tau_e={self.tau_e}; "
                "delayed kernels would be all zero")

    @property
    def decay_mem(self) -> float:
        return float(np.exp(-1.0 / self.tau_mem))

    @property
    def decay_syn(self) -> float:
        return float(np.exp(-1.0 / self.tau_syn))

    @property
    def decay_ref(self) -> float:
        return float(np.exp(-1.0 / self.tau_ref))


def build_alpha_kernel(params: FilterParams) -> CausalFilter:
    """exp(-d/tau_mem) - exp(-d/tau_syn) for d = 1..tau_e, zero at d = 0."""
    d = np.arange(params.tau_e + 1, dtype=np.float64)
    taps = np.exp(-d / params.tau_mem) - np.exp(-d / params.tau_syn)
    taps[0] = 0.0
    return CausalFilter(taps)


def build_readout_kernels(params: FilterParams) -> list[CausalFilter]:
    """``num_kernels`` copies of the alpha kernel delayed by 0, 1, ... steps."""
    base = build_alpha_kernel(params).taps
    kernels = []
    for k in range(params.num_kernels):
        taps = np.zeros_like(base)
        taps[k:] = base[:base.size - k]
        kernels.append(CausalFilter(taps))
    return kernels


def build_feedback_kernel(params: FilterParams) -> CausalFilter:
    """Impulse response of the refractory trace recursion, truncated at tau_e.

    r_t = c r_{t-1} + s_{t-1} gives tap c^(d-1) at delay d >= 1.
    """
    d = np.arange(params.tau_e + 1, dtype=np.float64)
    taps = np.exp(-(d - 1.0) / params.tau_ref)
    taps[0] = 0.0
    return CausalFilter(taps)


def ar_synaptic_response(params: FilterParams, length: int) -> CausalFilter:
    """Impulse response of the second-order synaptic recursion, ``length`` taps.

    Unrolling p_t = a p_{t-1} + q_{t-1}, q_t = b q_{t-1} + s_{t-1} gives
    (a^(d-1) - b^(d-1)) / (a - b) at delay d >= 1: the alpha kernel delayed
    by one step and rescaled by 1/(a - b).
    """
    a, b = params.decay_mem, params.decay_syn
    d = np.arange(length, dtype=np.float64)
    taps = (a ** (d - 1.0) - b ** (d - 1.0)) / (a - b)
    taps[0] = 0.0
    return CausalFilter(taps)


@dataclass
class TraceState:
    p: np.ndarray
    q: np.ndarray
    r: np.ndarray
    last_pre: np.ndarray
    last_post: np.ndarray

    @classmethod
    def zeros(cls, n_pre: int, n_post: int) -> "TraceState":
        return cls(np.zeros(n_pre), np.zeros(n_pre), np.zeros(n_post),
                   np.zeros(n_pre), np.zeros(n_post))

    def copy(self) -> "TraceState":
        return TraceState(self.p.copy(), self.q.copy(), self.r.copy(),
                          self.last_pre.copy(), self.last_post.copy())


def trace_step(state: TraceState, spikes_pre, spikes_post, params: FilterParams) -> TraceState:
    """Advance the AR traces one step given the spikes of the previous step."""
    spikes_pre = np.asarray(spikes_pre, dtype=np.float64)
    spikes_post = np.asarray(spikes_post, dtype=np.float64)
    if spikes_pre.shape != state.q.shape or spikes_post.shape != state.r.shape:
        raise ContractViolation(
            f"spike shapes {spikes_pre.shape}/{spikes_post.shape} do not match "
            f"trace shapes {state.q.shape}/{state.r.shape}")
    return TraceState(
        p=params.decay_mem * state.p + state.q,
        q=params.decay_syn * state.q + spikes_pre,
        r=params.decay_ref * state.r + spikes_post,
        last_pre=spikes_pre.copy(),
        last_post=spikes_post.copy(),
    )


@dataclass
class EligibilitySet:
    """Per-layer eligibilities in factored form.

    The synaptic eligibility is ``post[i] * pre[j]`` (hidden) or
    ``post[i] * pre[j, k]`` (readout with K kernels); it is only materialised
    on demand through :attr:`synaptic`.
    """

    post: np.ndarray
    pre: np.ndarray
    fb_trace: np.ndarray

    @property
    def synaptic(self) -> np.ndarray:
        if self.pre.ndim == 1:
            return np.outer(self.post, self.pre)
        return self.post[:, None, None] * self.pre[None, :, :]

    @property
    def feedback(self) -> np.ndarray:
        return self.post * self.fb_trace

    @property
    def bias(self) -> np.ndarray:
        return self.post

    def scaled(self, factor: np.ndarray) -> "EligibilitySet":
        """Per-neuron scaling, e.g. by the hidden learning signal."""
        return EligibilitySet(self.post * factor, self.pre, self.fb_trace)

    def dense(self) -> dict[str, np.ndarray]:
        return {"W": self.synaptic, "w_fb": self.feedback, "b": self.bias}


class NeuronLayer:
    kind: str

    def __init__(self, n_pre: int, n_post: int, params: FilterParams):
        self.n_pre = n_pre
        self.n_post = n_post
        self.params = params
        self.W: np.ndarray
        self.w_fb = np.zeros(n_post)
        self.b = np.zeros(n_post)

    def parameters(self) -> dict[str, np.ndarray]:
        return {"W": self.W, "w_fb": self.w_fb, "b": self.b}


class HiddenLayer(NeuronLayer):
    """Deterministic SRM layer, traces via AR recursions."""

    kind = HIDDEN

    def __init__(self, n_pre: int, n_post: int, params: FilterParams):
        super().__init__(n_pre, n_post, params)
        # Fortran order so rank-1 updates can go through BLAS dger in place.
        self.W = np.zeros((n_post, n_pre), order="F")
        self._a, self._b, self._c = params.decay_mem, params.decay_syn, params.decay_ref
        self.reset()

    def reset(self):
        self.state = TraceState.zeros(self.n_pre, self.n_post)

    def advance(self):
        s = self.state
        s.p *= self._a
        s.p += s.q
        s.q *= self._b
        s.q += s.last_pre
        s.r *= self._c
        s.r += s.last_post

    def record(self, pre, post):
        self.state.last_pre[:] = pre
        self.state.last_post[:] = post

    @property
    def pre_trace(self) -> np.ndarray:
        return self.state.p

    @property
    def fb_trace(self) -> np.ndarray:
        return self.state.r

    def potential(self) -> np.ndarray:
        return self.W @ self.state.p + self.w_fb * self.state.r + self.b


class ReadoutLayer(NeuronLayer):
    """Stochastic-threshold SRM layer with K delayed kernels per synapse."""

    kind = READOUT

    def __init__(self, n_pre: int, n_post: int, params: FilterParams):
        super().__init__(n_pre, n_post, params)
        self.K = params.num_kernels
        self.W = np.zeros((n_post, n_pre, self.K))
        kernels = build_readout_kernels(params)
        # row d-1 of a buffer holds the spikes from step t-d
        self._kmat = np.stack([k.taps[1:] for k in kernels])  # (K, tau_e)
        self._fbk = build_feedback_kernel(params).taps[1:]  # (tau_e,)
        self.reset()

    def reset(self):
        tau = self.params.tau_e
        self.buf_pre = np.zeros((tau, self.n_pre))
        self.buf_post = np.zeros((tau, self.n_post))
        self._pending_pre = np.zeros(self.n_pre)
        self._pending_post = np.zeros(self.n_post)
        self.P = np.zeros((self.n_pre, self.K))
        self.r = np.zeros(self.n_post)

    def advance(self):
        self.buf_pre[1:] = self.buf_pre[:-1]
        self.buf_pre[0] = self._pending_pre
        self.buf_post[1:] = self.buf_post[:-1]
        self.buf_post[0] = self._pending_post
        self.P = (self._kmat @ self.buf_pre).T
        self.r = self._fbk @ self.buf_post

    def record(self, pre, post):
        self._pending_pre[:] = pre
        self._pending_post[:] = post

    @property
    def pre_trace(self) -> np.ndarray:
        return self.P

    @property
    def fb_trace(self) -> np.ndarray:
        return self.r

    def potential(self) -> np.ndarray:
        syn = self.W.reshape(self.n_post, -1) @ self.P.reshape(-1)
        return syn + self.w_fb * self.r + self.b


def membrane_potential(layer: NeuronLayer) -> np.ndarray:
    """u_i = sum_j w_ij p_j (+ kernel sum for readout) + w_i r_i + bias_i."""
    return layer.potential()


def hidden_step(u) -> np.ndarray:
    """Heaviside with Theta(0) = 0."""
    return (np.asarray(u) > 0.0).astype(np.float64)


def readout_step(u, rng: Rng, clamp=None) -> tuple[np.ndarray, np.ndarray]:
    """Sample y_i ~ Bern(sigmoid(u_i)) (or take ``clamp``) and return log-probs."""
    u = np.asarray(u, dtype=np.float64)
    if clamp is None:
        y = rng.bernoulli(sigmoid(u))
    else:
        y = np.asarray(clamp, dtype=np.float64)
        if y.shape != u.shape:
            raise ContractViolation(f"clamped readout shape {y.shape} != {u.shape}")
    return y, log_bernoulli_logit(y, u)


def readout_eligibility(pre_trace, fb_trace, u, y) -> EligibilitySet:
    """Exact gradient of log p(y_t | u_t) for every readout parameter."""
    err = np.asarray(y, dtype=np.float64) - sigmoid(u)
    return EligibilitySet(err, pre_trace, fb_trace)


def hidden_eligibility(pre_trace, fb_trace, u, kind: str = "sigmoid_prime",
                       theta: float = 0.0) -> EligibilitySet:
    """Surrogate-gradient eligibility Theta'(u - theta) times the traces."""
    return EligibilitySet(surrogate_derivative(np.asarray(u) - theta, kind), pre_trace, fb_trace)


def learning_signal(B: np.ndarray, y, sigma_u) -> np.ndarray:
    """L_i = sum_k B_ik (y_k - sigma(u_k))."""
    err = np.asarray(y, dtype=np.float64) - np.asarray(sigma_u, dtype=np.float64)
    if B.shape[1] != err.shape[0]:
        raise ContractViolation(f"feedback matrix {B.shape} vs {err.shape[0]} readouts")
    return B @ err


@dataclass
class StepResult:
    y: np.ndarray
    logprob: np.ndarray
    u: np.ndarray
    sigma_u: np.ndarray
    hidden_spikes: list[np.ndarray]
    eligibilities: list[EligibilitySet]  # hidden layers first, readout last
    learning_signals: list[np.ndarray]  # one per hidden layer

    @property
    def deltas(self) -> list[EligibilitySet]:
        """Update directions: L * e for hidden layers, e for the readout."""
        scaled = [e.scaled(L) for e, L in zip(self.eligibilities[:-1], self.learning_signals)]
        return scaled + [self.eligibilities[-1]]


@dataclass
class EncoderInit:
    bias: float = -1.0
    feedback_weight: float = -0.5
    weight_scale: float = 1.0  # multiplies the sqrt(1/fan_in) half-width


class EncoderNetwork:
    """Layered SRM network: hidden layers followed by one stochastic readout.

    ``hidden_params`` defaults to ``params``; hidden layers ignore ``tau_e``
    because their AR traces have unbounded memory.
    """

    def __init__(self, n_inputs: int, hidden_sizes, n_readout: int, params: FilterParams,
                 seed: int = 0, hidden_params: FilterParams | None = None,
                 surrogate: str = "sigmoid_prime", theta: float = 0.0,
                 init: EncoderInit | None = None):
        if n_inputs < 1 or n_readout < 1 or any(h < 1 for h in hidden_sizes):
            raise ConfigError("layer sizes must be positive")
        surrogate_derivative(0.0, surrogate)  # validates the kind early
        self.n_inputs = n_inputs
        self.hidden_sizes = list(hidden_sizes)
        self.n_readout = n_readout
        self.params = params
        self.hidden_params = hidden_params or params
        self.surrogate = surrogate
        self.theta = theta
        self.init = init or EncoderInit()
        self.hidden: list[HiddenLayer] = []
        n_pre = n_inputs
        for h in self.hidden_sizes:
            self.hidden.append(HiddenLayer(n_pre, h, self.hidden_params))
            n_pre = h
        self.readout = ReadoutLayer(n_pre, n_readout, params)
        self.feedback: list[np.ndarray] = [np.zeros((h, n_readout)) for h in self.hidden_sizes]
        self.initialize(seed)

    @property
    def layers(self) -> list[NeuronLayer]:
        return [*self.hidden, self.readout]

    def initialize(self, seed: int):
        rng = Rng(seed, stream_id=0)
        for layer in self.layers:
            fan_in = layer.n_pre * (layer.K if layer.kind == READOUT else 1)
            c = self.init.weight_scale * np.sqrt(1.0 / fan_in)
            layer.W[...] = rng.uniform(-c, c, size=layer.W.shape)
            layer.w_fb[:] = self.init.feedback_weight
            layer.b[:] = self.init.bias
        for B in self.feedback:
            B[...] = rng.uniform(-1.0, 1.0, size=B.shape) / np.sqrt(self.n_readout)
        self.reset()

    def reset(self):
        for layer in self.layers:
            layer.reset()

    def layer_names(self) -> list[str]:
        return [f"hidden{i}" for i in range(len(self.hidden))] + ["readout"]

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat name -> array mapping (live references, not copies)."""
        out = {}
        for name, layer in zip(self.layer_names(), self.layers):
            for k, v in layer.parameters().items():
                out[f"{name}.{k}"] = v
        return out

    def forward_step(self, x_t, rng: Rng | None = None, clamp=None) -> StepResult:
        """Advance the network from t-1 to t and emit hidden spikes and readout samples.

        ``clamp`` fixes the readout outcome (teacher forcing) instead of sampling.
        """
        x_t = np.asarray(x_t, dtype=np.float64)
        if x_t.shape != (self.n_inputs,):
            raise ContractViolation(f"input of shape {x_t.shape}, expected ({self.n_inputs},)")
        if clamp is None and rng is None:
            raise ContractViolation("forward_step needs an rng unless the readout is clamped")
        pre = x_t
        hidden_spikes, eligs, us = [], [], []
        for layer in self.hidden:
            layer.advance()
            u = layer.potential()
            z = hidden_step(u)
            eligs.append(hidden_eligibility(layer.pre_trace.copy(), layer.fb_trace.copy(), u,
                                            self.surrogate, self.theta))
            layer.record(pre, z)
            hidden_spikes.append(z)
            us.append(u)
            pre = z
        ro = self.readout
        ro.advance()
        u = ro.potential()
        y, logprob = readout_step(u, rng, clamp)
        sig = sigmoid(u)
        eligs.append(readout_eligibility(ro.pre_trace, ro.fb_trace, u, y))
        ro.record(pre, y)
        signals = [learning_signal(B, y, sig) for B in self.feedback]
        return StepResult(y, logprob, u, sig, hidden_spikes, eligs, signals)

    def run(self, x, rng: Rng | None = None, clamp=None):
        """Reset, then step through ``x`` (N_X x T). Returns (y, total log-prob, hidden spikes)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] != self.n_inputs:
            raise ContractViolation(f"input train of shape {x.shape}, expected ({self.n_inputs}, T)")
        T = x.shape[1]
        self.reset()
        ys = np.zeros((self.n_readout, T))
        hs = [np.zeros((h, T)) for h in self.hidden_sizes]
        total = 0.0
        for t in range(T):
            out = self.forward_step(x[:, t], rng, None if clamp is None else clamp[:, t])
            ys[:, t] = out.y
            for l, z in enumerate(out.hidden_spikes):
                hs[l][:, t] = z
            total += float(out.logprob.sum())
        return ys, total, hs

    def apply_update(self, deltas: list[EligibilitySet], scale: float):
        """w <- w - scale * delta for every layer (scale = eta * signal)."""
        if scale == 0.0:
            return
        for layer, d in zip(self.layers, deltas):
            if layer.kind == HIDDEN:
                dger(-scale, d.post, d.pre, a=layer.W, overwrite_a=True)
            else:
                layer.W -= scale * (d.post[:, None, None] * d.pre[None, :, :])
            layer.w_fb -= scale * d.feedback
            layer.b -= scale * d.bias

    def apply_gradients(self, grads: dict[str, np.ndarray], scale: float):
        params = self.parameters()
        for k, g in grads.items():
            params[k] -= scale * g


def sequence_log_prob(net: EncoderNetwork, x, y) -> float:
    """log p(y || x): teacher-forced sum of readout log-likelihoods."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if y.ndim != 2 or y.shape[0] != net.n_readout or y.shape[1] != x.shape[1]:
        raise ContractViolation(f"readout train {y.shape} does not match input {x.shape}")
    if x.shape[1] == 0:
        return 0.0
    _, total, _ = net.run(x, clamp=y)
    return total
