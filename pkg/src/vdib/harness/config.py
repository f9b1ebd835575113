"""Experiment configuration: presets, file loading and ``key=value`` overrides."""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

TASKS = ("predictive_coding", "mnist_naturalize", "mnistdvs_naturalize")
DATA_ROOT_ENV = "VDIB_DATA_ROOT"
DEFAULT_DATA_ROOT = "/root/data"


class ExperimentConfig(BaseModel):
    """Everything needed to reproduce one experiment (all seeds)."""

    model_config = ConfigDict(extra="forbid", validate_assignment=True)

    task: Literal["predictive_coding", "mnist_naturalize", "mnistdvs_naturalize"] = \
        "predictive_coding"

    # learning rule
    beta: float = Field(1.0, ge=0)
    eta: float = Field(1e-2, ge=0)
    eta_encoder: float | None = Field(None, ge=0)
    eta_decoder: float | None = Field(None, ge=0)
    kappa: float = Field(0.0, ge=0, lt=1)
    prior_p: float = Field(0.2, gt=0, lt=1)
    tau_e: int = Field(5, ge=1)
    tau_d: int = Field(5, ge=1)
    T: int = Field(100, ge=1)
    update_mode: Literal["online", "episodic"] = "online"
    clip: float | None = Field(100.0, gt=0)

    # architecture
    n_inputs: int = Field(20, ge=1)
    hidden_sizes: list[int] = Field(default_factory=list)
    n_readout: int = Field(10, ge=1)
    num_kernels: int = Field(1, ge=1)
    tau_mem: float = Field(20.0, gt=0)
    tau_syn: float = Field(5.0, gt=0)
    tau_ref: float = Field(10.0, gt=0)
    init_weight_scale: float = Field(1.0, gt=0)
    init_bias: float = -1.0
    decoder_kind: Literal["linear_softmax", "mlp"] = "linear_softmax"
    decoder_hidden: int | None = Field(None, ge=1)
    decoding: Literal["time", "rate"] = "time"

    # predictive coding data
    delta: int = -2
    n_positions: int = Field(20, ge=2)
    n_blobs: int = Field(2, ge=1, le=2)
    blob_sigma: float = Field(0.45, gt=0)
    blob_a: float = 0.9
    blob_b: float = 0.14
    test_T: int = Field(1000, ge=1)

    # image tasks
    data_root: str | None = None
    encoding: Literal["poisson", "ttfs"] = "ttfs"
    poisson_gain: float = Field(0.5, gt=0, le=1)
    reference_mode: Literal["final_step", "every_step"] = "final_step"
    n_test: int = Field(10000, ge=1)
    compare_rate: bool = True
    classifier_epochs: int = Field(8, ge=1)
    dvs_scale: str | None = None

    # run control
    n_train: int = Field(50000, ge=0)
    log_every: int = Field(1000, ge=1)
    checkpoint_every: int | None = Field(None, ge=1)
    seeds: list[int] = Field(default_factory=lambda: [0, 1, 2, 3, 4])
    output_dir: str = "runs/default"
    n_images: int = Field(8, ge=0)

    @model_validator(mode="after")
    def _check_task(self):
        if self.task == "predictive_coding":
            if self.data_root is not None:
                raise ValueError("predictive_coding generates its own data; data_root must be unset")
        else:
            if self.decoder_kind != "mlp":
                raise ValueError(f"{self.task} reconstructs images and needs decoder_kind = 'mlp'")
            expect = 784 if self.task == "mnist_naturalize" else 26 * 26
            if self.n_inputs != expect:
                raise ValueError(f"{self.task} has {expect} inputs, got n_inputs = {self.n_inputs}")
        if not self.seeds:
            raise ValueError("seeds must not be empty")
        if self.num_kernels > self.tau_e:
            raise ValueError("num_kernels must not exceed tau_e")
        if abs(self.blob_a) >= 1:
            raise ValueError("|blob_a| must be < 1")
        return self

    @property
    def n_ref(self) -> int:
        if self.task == "predictive_coding":
            n = self.n_positions
            return n * (n + 1) // 2
        return self.n_inputs if self.task == "mnist_naturalize" else 784

    @property
    def likelihood(self) -> str:
        return "categorical" if self.task == "predictive_coding" else "bernoulli_pixel"

    def resolved_data_root(self) -> Path:
        return Path(self.data_root or os.environ.get(DATA_ROOT_ENV, DEFAULT_DATA_ROOT))


PAPER = {
    "predictive_coding": dict(
        task="predictive_coding", beta=1.0, eta=1e-2, prior_p=0.2, tau_e=5, tau_d=5, T=100,
        n_inputs=20, hidden_sizes=[], n_readout=10, decoder_kind="linear_softmax",
        test_T=1000, n_train=50000, log_every=1000, seeds=[0, 1, 2, 3, 4]),
    "mnist_naturalize": dict(
        task="mnist_naturalize", beta=1e-3, eta=1e-5, prior_p=0.3, tau_e=30, tau_d=30, T=30,
        n_inputs=784, hidden_sizes=[600], n_readout=256, decoder_kind="mlp",
        n_train=200000, n_test=10000, log_every=1000, seeds=[0, 1, 2]),
    "mnistdvs_naturalize": dict(
        task="mnistdvs_naturalize", beta=1e-3, eta=1e-5, prior_p=0.3, tau_e=30, tau_d=30, T=200,
        n_inputs=676, hidden_sizes=[600], n_readout=256, decoder_kind="mlp",
        n_train=100000, n_test=1000, log_every=1000, seeds=[0, 1, 2]),
}

# Example counts cut 10x; MNIST also shrinks T and N_Y. The learning rates,
# init scale and baseline are desk calibrations (see README).
DESK = {
    "predictive_coding": dict(
        PAPER["predictive_coding"], n_train=5000, log_every=500, seeds=[0, 1, 2],
        eta_encoder=1e-4, eta_decoder=2e-2, kappa=0.99, init_weight_scale=40.0),
    "mnist_naturalize": dict(
        PAPER["mnist_naturalize"], n_train=20000, T=16, tau_e=16, tau_d=16, n_readout=64,
        n_test=2000, log_every=1000, eta_encoder=1e-7, eta_decoder=1e-3, kappa=0.99,
        init_weight_scale=5.0),
    "mnistdvs_naturalize": dict(
        PAPER["mnistdvs_naturalize"], n_train=10000, n_readout=64, n_test=500, log_every=500,
        eta_encoder=1e-7, eta_decoder=1e-3, kappa=0.99, init_weight_scale=5.0),
}

PRESETS = {"paper": PAPER, "desk": DESK}


def preset(task: str = "predictive_coding", scale: str = "desk") -> dict:
    if scale not in PRESETS:
        raise ConfigError(f"unknown preset scale {scale!r}; expected one of {tuple(PRESETS)}")
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    return dict(PRESETS[scale][task])


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        low = text.lower()
        if low in ("none", "null"):
            return None
        if low in ("true", "false"):
            return low == "true"
        return text


def parse_overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, value = item.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"override {item!r} has an empty key")
        v = _parse_value(value.strip())
        if key in ("seeds", "hidden_sizes") and isinstance(v, str):
            v = [int(s) for s in v.split(",") if s.strip()]
        if key in ("seeds", "hidden_sizes") and isinstance(v, int):
            v = [v]
        out[key] = v
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    raw = path.read_bytes()  # OSError propagates as an I/O failure
    try:
        if path.suffix.lower() == ".json":
            data = json.loads(raw)
        else:
            data = tomllib.loads(raw.decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a table/object at the top level")
    return data


def build_config(base: dict | None = None, overrides=None, scale: str | None = None) -> ExperimentConfig:
    """Preset (if ``scale`` given) <- ``base`` <- ``overrides``, then validation."""
    base = dict(base or {})
    merged = {}
    if scale is not None:
        merged.update(preset(base.get("task", "predictive_coding"), scale))
    merged.update(base)
    extra = overrides if isinstance(overrides, dict) else parse_overrides(overrides)
    if "task" in extra and scale is not None and extra["task"] != merged.get("task"):
        merged = {**preset(extra["task"], scale), **base}
    merged.update(extra)
    try:
        return ExperimentConfig(**merged)
    except ValidationError as exc:
        raise ConfigError(_format_validation(exc)) from None


def _format_validation(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "config"
        parts.append(f"{loc}: {err['msg']}")
    return "invalid config: " + "; ".join(parts)


def load_config(path=None, overrides=None, scale: str | None = None) -> ExperimentConfig:
    base = read_config_file(path) if path is not None else {}
    scale = base.pop("preset", scale)
    return build_config(base, overrides, scale)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return cfg.model_dump(mode="json")
