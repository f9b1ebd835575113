"""Experiment runners: predictive coding, image naturalization, sweeps, exports.

Every run directory gets the resolved config (``config.json``) that reproduces
it, one metrics CSV and final checkpoint per seed, and a ``summary.json``.
"""

from __future__ import annotations

import csv
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from pydantic import BaseModel

from ..checkpoint import load_checkpoint, save_checkpoint
from ..data import (
    BlobProcessParams,
    LabeledSequence,
    bin_events,
    blob_stream,
    build_reference,
    class_exemplars,
    encode_image,
    gen_blob_sequence,
    load_mnist,
    read_aedat,
    save_dataset,
    scan_mnistdvs,
)
from ..decoder import DecoderModel, _forward, decoder_logloss, feature_size, window_features
from ..encoder import EncoderInit, EncoderNetwork, FilterParams
from ..errors import ConfigError
from ..mathcore import Rng, softmax
from ..trainer import VdibConfig, VdibSystem, run_episode, train
from .classifier import trained_classifier
from .config import ExperimentConfig, config_to_dict

log = logging.getLogger(__name__)

# RNG stream ids, fixed so that every run is reproducible from (config, seed)
TRAIN_DATA, TRAIN_SAMPLING, TEST_DATA, TEST_SAMPLING = 2, 3, 99, 98

SWEEP_AXES = ("beta", "delta", "tau_e", "tau_d")
SWEEP_FIELDS = ("axis", "value", "seed", "mse", "untrained_mse", "spike_rate", "accuracy",
                "position_error", "nll")


class RunArtifacts(BaseModel):
    run_dir: str
    config_path: str
    metrics: list[str] = []
    checkpoints: list[str] = []
    images: list[str] = []
    representations: str | None = None
    summary: dict = {}


# --- construction --------------------------------------------------------------


def vdib_config(cfg: ExperimentConfig, seed: int) -> VdibConfig:
    return VdibConfig(beta=cfg.beta, eta=cfg.eta, kappa=cfg.kappa, prior_p=cfg.prior_p,
                      tau_e=cfg.tau_e, tau_d=cfg.tau_d, T=cfg.T, update_mode=cfg.update_mode,
                      eta_encoder=cfg.eta_encoder, eta_decoder=cfg.eta_decoder, clip=cfg.clip,
                      seed=seed)


def build_system(cfg: ExperimentConfig, seed: int, decoding: str | None = None) -> VdibSystem:
    decoding = decoding or cfg.decoding
    fp = FilterParams(tau_mem=cfg.tau_mem, tau_syn=cfg.tau_syn, tau_ref=cfg.tau_ref,
                      tau_e=cfg.tau_e, num_kernels=cfg.num_kernels)
    net = EncoderNetwork(cfg.n_inputs, cfg.hidden_sizes, cfg.n_readout, fp, seed=seed,
                         init=EncoderInit(bias=cfg.init_bias, weight_scale=cfg.init_weight_scale))
    n_in = feature_size(cfg.n_readout, cfg.tau_d, decoding)
    hidden = cfg.decoder_hidden
    if cfg.decoder_kind == "mlp" and hidden is None:
        # the same hidden width for time and rate decoding keeps the comparison fair
        hidden = max(feature_size(cfg.n_readout, cfg.tau_d, "time") // 2, 1)
    dec = DecoderModel.create(cfg.decoder_kind, cfg.likelihood, n_in, cfg.n_ref, seed=seed,
                              hidden_size=hidden)
    return VdibSystem(net, dec, decoding)


def blob_params(cfg: ExperimentConfig) -> BlobProcessParams:
    return BlobProcessParams(n_positions=cfg.n_positions, n_blobs=cfg.n_blobs,
                             sigma=cfg.blob_sigma, a=cfg.blob_a, b=cfg.blob_b, delta=cfg.delta)


def _prepare_dir(cfg: ExperimentConfig, out_dir) -> tuple[Path, Path]:
    run_dir = Path(out_dir or cfg.output_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg_path = run_dir / "config.json"
    cfg_path.write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
    return run_dir, cfg_path


def _mean_std(values) -> dict:
    a = np.asarray(values, dtype=np.float64)
    return {"mean": float(a.mean()), "std": float(a.std(ddof=1)) if a.size > 1 else 0.0}


# --- predictive coding ---------------------------------------------------------


def _pair_table(n: int) -> np.ndarray:
    """Row c holds the (lo, hi) positions of pair class c."""
    return np.array([(a, b) for a in range(1, n + 1) for b in range(a, n + 1)])


def evaluate_predictive(system: VdibSystem, cfg: ExperimentConfig, test: LabeledSequence,
                        seed: int) -> dict:
    """Probability MSE, NLL, top-1 pair accuracy and position error on ``test``."""
    vc = vdib_config(cfg, seed)
    net, dec = system.encoder, system.decoder
    rng = Rng(seed, TEST_SAMPLING)
    pairs = _pair_table(cfg.n_positions)
    net.reset()
    window = system.new_window(vc.tau_d)
    sq, nll, hits, pos_err, n_def, spikes = 0.0, 0.0, 0, 0.0, 0, 0.0
    for t in range(test.T):
        out = net.forward_step(test.x[:, t], rng)
        spikes += float(out.y.sum())
        window.push(out.y)
        if not test.mask[t]:
            continue
        o, _ = _forward(dec, window_features(window, system.decoding))
        p = softmax(o)
        target = test.r[:, t]
        truth = int(np.argmax(target))
        guess = int(np.argmax(p))
        sq += float(np.sum((p - target) ** 2))
        nll += decoder_logloss(o, truth, "categorical")
        hits += guess == truth
        d = np.abs(pairs[guess] - pairs[truth]) % cfg.n_positions
        pos_err += float(np.minimum(d, cfg.n_positions - d).mean())
        n_def += 1
    n_def = max(n_def, 1)
    return {"mse": sq / n_def, "nll": nll / n_def, "accuracy": hits / n_def,
            "position_error": pos_err / n_def,
            "spike_rate": spikes / (net.n_readout * test.T)}


def pc_single_run(cfg_dict: dict, seed: int, run_dir: str | None = None) -> dict:
    """Train and evaluate one seed. Top-level so process pools can pickle it."""
    cfg = ExperimentConfig(**cfg_dict)
    system = build_system(cfg, seed)
    vc = vdib_config(cfg, seed)
    bp = blob_params(cfg)
    test = gen_blob_sequence(Rng(seed, TEST_DATA), bp, cfg.test_T)
    untrained = evaluate_predictive(system, cfg, test, seed)
    data = blob_stream(Rng(seed, TRAIN_DATA), bp, cfg.T)
    ckpt_cb = None
    if run_dir is not None and cfg.checkpoint_every:
        def ckpt_cb(i, s):
            save_checkpoint(Path(run_dir) / f"seed{seed}_iter{i}.npz", s, cfg_dict, i)
    metrics = train(system, data, vc, Rng(seed, TRAIN_SAMPLING), n_iterations=cfg.n_train,
                    log_every=cfg.log_every, checkpoint_every=cfg.checkpoint_every,
                    on_checkpoint=ckpt_cb)
    trained = evaluate_predictive(system, cfg, test, seed)
    out = {"seed": seed, "untrained": untrained, "trained": trained,
           "clip_events": system.clip_events}
    if run_dir is not None:
        rd = Path(run_dir)
        metrics.to_csv(rd / f"metrics_seed{seed}.csv")
        save_checkpoint(rd / f"checkpoint_seed{seed}.npz", system, cfg_dict, cfg.n_train)
    return out


def _map(fn, jobs, workers: int):
    if workers <= 1 or len(jobs) <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, *j) for j in jobs]
        return [f.result() for f in futures]


def run_predictive_coding(cfg: ExperimentConfig, out_dir=None, workers: int = 1) -> RunArtifacts:
    if cfg.task != "predictive_coding":
        raise ConfigError(f"run_predictive_coding needs task = predictive_coding, got {cfg.task}")
    run_dir, cfg_path = _prepare_dir(cfg, out_dir)
    cfg_dict = config_to_dict(cfg)
    results = _map(pc_single_run, [(cfg_dict, s, str(run_dir)) for s in cfg.seeds], workers)
    summary = {"task": cfg.task, "seeds": cfg.seeds, "per_seed": results}
    for key in ("mse", "nll", "accuracy", "position_error", "spike_rate"):
        summary[key] = _mean_std([r["trained"][key] for r in results])
        summary[f"untrained_{key}"] = _mean_std([r["untrained"][key] for r in results])
    summary["progress"] = summary["mse"]["mean"] < 0.8 * summary["untrained_mse"]["mean"]
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    log.info("predictive coding: mse %.4f (untrained %.4f)", summary["mse"]["mean"],
             summary["untrained_mse"]["mean"])
    return RunArtifacts(
        run_dir=str(run_dir), config_path=str(cfg_path),
        metrics=[str(run_dir / f"metrics_seed{s}.csv") for s in cfg.seeds],
        checkpoints=[str(run_dir / f"checkpoint_seed{s}.npz") for s in cfg.seeds],
        summary=summary)


# --- image tasks -------------------------------------------------------------------


def write_pgm(path, image, width: int = 28, height: int = 28) -> Path:
    """Binary P5 graymap, intensities in [0, 1]."""
    img = np.clip(np.asarray(image, dtype=np.float64).reshape(height, width), 0.0, 1.0)
    path = Path(path)
    path.write_bytes(f"P5\n{width} {height}\n255\n".encode()
                     + np.rint(img * 255).astype(np.uint8).tobytes())
    return path


class ImageTask:
    """Training/test sample provider for the MNIST and MNIST-DVS tasks."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        root = cfg.resolved_data_root()
        self.train_images, self.train_labels = load_mnist(root / "mnist", "train")
        if cfg.task == "mnist_naturalize":
            self.test_images, self.test_labels = load_mnist(root / "mnist", "test")
            self.test_images = self.test_images[:cfg.n_test]
            self.test_labels = self.test_labels[:cfg.n_test]
            self.n_train_items = len(self.train_images)
        else:
            files = scan_mnistdvs(root / "mnistdvs", cfg.dvs_scale)
            if not files:
                raise FileNotFoundError(f"no MNIST-DVS recordings under {root / 'mnistdvs'}")
            self.exemplars = class_exemplars(self.train_images, self.train_labels)
            self.test_files = files[::10][:cfg.n_test]
            self.train_files = [f for i, f in enumerate(files) if i % 10]
            self.test_labels = np.array([d for _, d in self.test_files])
            self.test_images = np.stack([self.exemplars[d] for d in self.test_labels])
            self.n_train_items = len(self.train_files)

    def _dvs_sample(self, path, digit) -> LabeledSequence:
        x = bin_events(read_aedat(path), duration_ms=self.cfg.T * 10.0)
        r, mask = build_reference(self.exemplars[digit], self.cfg.T, self.cfg.reference_mode)
        return LabeledSequence(x, r, mask, {"label": digit})

    def sample(self, index: int, split: str, rng: Rng) -> LabeledSequence:
        cfg = self.cfg
        if cfg.task == "mnist_naturalize":
            imgs, labs = ((self.train_images, self.train_labels) if split == "train"
                          else (self.test_images, self.test_labels))
            return encode_image(imgs[index], cfg.T, cfg.encoding, rng, cfg.poisson_gain,
                                cfg.reference_mode, int(labs[index]))
        files = self.train_files if split == "train" else self.test_files
        return self._dvs_sample(*files[index])

    def train_stream(self, rng: Rng):
        while True:
            for i in rng.permutation(self.n_train_items):
                yield self.sample(int(i), "train", rng)

    def n_test(self) -> int:
        return len(self.test_labels)


def evaluate_reconstruction(system: VdibSystem, task: ImageTask, seed: int, vc: VdibConfig,
                            n_images: int = 0, image_dir: Path | None = None,
                            tag: str = "") -> dict:
    rng = Rng(seed, TEST_SAMPLING)
    recon = np.empty_like(task.test_images)
    spikes = 0.0
    images = []
    for i in range(task.n_test()):
        ep = run_episode(system, task.sample(i, "test", rng), vc, rng, learn=False, collect=False)
        recon[i] = ep.prediction
        spikes += ep.readout_spikes
        if image_dir is not None and i < n_images:
            images.append(str(write_pgm(image_dir / f"{tag}recon_{i}.pgm", recon[i])))
            images.append(str(write_pgm(image_dir / f"{tag}target_{i}.pgm", task.test_images[i])))
    clf = trained_classifier(task.train_images, task.train_labels, task.cfg.classifier_epochs)
    return {
        "mse": float(np.mean((recon - task.test_images) ** 2)),
        "accuracy": clf.accuracy(recon, task.test_labels),
        "spike_rate": spikes / (system.encoder.n_readout * vc.T * task.n_test()),
        "images": images,
    }


def image_single_run(cfg_dict: dict, seed: int, decoding: str, run_dir: str | None = None,
                     task: ImageTask | None = None) -> dict:
    cfg = ExperimentConfig(**cfg_dict)
    task = task or ImageTask(cfg)
    system = build_system(cfg, seed, decoding)
    vc = vdib_config(cfg, seed)
    rng = Rng(seed, TRAIN_SAMPLING)
    metrics = train(system, task.train_stream(Rng(seed, TRAIN_DATA)), vc, rng,
                    n_iterations=cfg.n_train, log_every=cfg.log_every)
    rd = Path(run_dir) if run_dir is not None else None
    res = evaluate_reconstruction(system, task, seed, vc, cfg.n_images if rd else 0,
                                  rd, f"{decoding}_seed{seed}_")
    if rd is not None:
        metrics.to_csv(rd / f"metrics_{decoding}_seed{seed}.csv")
        save_checkpoint(rd / f"checkpoint_{decoding}_seed{seed}.npz", system, cfg_dict, cfg.n_train)
    return {"seed": seed, "decoding": decoding, **res}


def run_mnist_naturalization(cfg: ExperimentConfig, out_dir=None) -> RunArtifacts:
    """Train VDIB time decoding (and the rate_pool baseline) and score reconstructions."""
    if cfg.task not in ("mnist_naturalize", "mnistdvs_naturalize"):
        raise ConfigError(f"run_mnist_naturalization needs an image task, got {cfg.task}")
    run_dir, cfg_path = _prepare_dir(cfg, out_dir)
    cfg_dict = config_to_dict(cfg)
    task = ImageTask(cfg)
    modes = ["time", "rate"] if cfg.compare_rate else [cfg.decoding]
    results = [image_single_run(cfg_dict, s, m, str(run_dir), task)
               for s in cfg.seeds for m in modes]
    summary: dict = {"task": cfg.task, "seeds": cfg.seeds, "per_seed": results}
    for m in modes:
        rows = [r for r in results if r["decoding"] == m]
        summary[m] = {k: _mean_std([r[k] for r in rows]) for k in ("mse", "accuracy", "spike_rate")}
    if cfg.compare_rate:
        wins = 0
        for s in cfg.seeds:
            t = next(r for r in results if r["seed"] == s and r["decoding"] == "time")
            r_ = next(r for r in results if r["seed"] == s and r["decoding"] == "rate")
            wins += t["mse"] < r_["mse"] and t["accuracy"] > r_["accuracy"]
        summary["time_beats_rate_seeds"] = wins
    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2))
    images = [p for r in results for p in r["images"]]
    return RunArtifacts(
        run_dir=str(run_dir), config_path=str(cfg_path),
        metrics=[str(run_dir / f"metrics_{r['decoding']}_seed{r['seed']}.csv") for r in results],
        checkpoints=[str(run_dir / f"checkpoint_{r['decoding']}_seed{r['seed']}.npz")
                     for r in results],
        images=images, summary=summary)


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int = 1) -> RunArtifacts:
    if cfg.task == "predictive_coding":
        return run_predictive_coding(cfg, out_dir, workers)
    return run_mnist_naturalization(cfg, out_dir)


# --- sweeps ----------------------------------------------------------------------


def _sweep_point(cfg_dict: dict, axis: str, value, seed: int, run_dir: str | None):
    cfg_dict = {**cfg_dict, axis: value}
    res = pc_single_run(cfg_dict, seed, run_dir)
    t = res["trained"]
    return {"axis": axis, "value": value, "seed": seed, "mse": t["mse"],
            "untrained_mse": res["untrained"]["mse"], "spike_rate": t["spike_rate"],
            "accuracy": t["accuracy"], "position_error": t["position_error"], "nll": t["nll"]}


def sweep(cfg: ExperimentConfig, axis: str, values, out=None, workers: int = 1) -> list[dict]:
    """One predictive-coding run per (value, seed); long-format rows, optionally as CSV."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = list(values)
    if not values:
        raise ConfigError("sweep needs at least one value")
    if cfg.task != "predictive_coding":
        raise ConfigError("sweeps are defined for the predictive_coding task")
    base = config_to_dict(cfg)
    for v in values:  # validate every point before spending compute
        try:
            ExperimentConfig(**{**base, axis: v})
        except ValueError as exc:
            raise ConfigError(f"{axis}={v}: {exc}") from None
    run_root = Path(out).parent / f"{Path(out).stem}_runs" if out is not None else None
    jobs = []
    for v in values:
        for s in cfg.seeds:
            rd = None
            if run_root is not None:
                rd = run_root / f"{axis}={v}"
                rd.mkdir(parents=True, exist_ok=True)
                rd = str(rd)
            jobs.append((base, axis, v, s, rd))
    rows = _map(_sweep_point, jobs, workers)
    if out is not None:
        write_rows(out, rows, SWEEP_FIELDS)
    return rows


def write_rows(path, rows, fields) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return path


def summarize_sweep(rows) -> dict:
    """Mean over seeds of each metric, keyed by axis value (input order kept)."""
    out: dict = {}
    for r in rows:
        out.setdefault(r["value"], []).append(r)
    return {v: {k: float(np.mean([r[k] for r in rs])) for k in ("mse", "spike_rate", "accuracy",
                                                                  "untrained_mse", "nll")}
            for v, rs in out.items()}


# --- representations and generated data -----------------------------------------------


def task_samples(cfg: ExperimentConfig, n: int, seed: int, split: str = "test"):
    """``n`` labelled samples for ``cfg.task`` (label = digit, or the final pair class)."""
    if cfg.task == "predictive_coding":
        rng = Rng(seed, TEST_DATA if split == "test" else TRAIN_DATA)
        for s in blob_stream(rng, blob_params(cfg), cfg.T, n):
            defined = np.flatnonzero(s.mask)
            s.meta["label"] = int(s.meta["classes"][defined[-1]]) if defined.size else -1
            yield s
        return
    task = ImageTask(cfg)
    rng = Rng(seed, TEST_SAMPLING)
    limit = task.n_test() if split == "test" else task.n_train_items
    for i in range(min(n, limit)):
        yield task.sample(i, split, rng)


def export_representations(checkpoint, samples, out, full: bool = False,
                           seed: int = 0) -> Path:
    """CSV: label, per-unit readout spike counts, and optionally the flattened train."""
    system, _ = load_checkpoint(checkpoint)
    net = system.encoder
    rng = Rng(seed, TEST_SAMPLING)
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        header = None
        for s in samples:
            y, _, _ = net.run(s.x, rng)
            if header is None:
                header = ["label"] + [f"count_{i}" for i in range(net.n_readout)]
                if full:
                    header += [f"y_{i}_{t}" for i in range(net.n_readout) for t in range(y.shape[1])]
                w.writerow(header)
            row = [s.meta.get("label", "")] + [int(c) for c in y.sum(axis=1)]
            if full:
                row += [int(v) for v in y.ravel()]
            w.writerow(row)
        if header is None:
            w.writerow(["label"] + [f"count_{i}" for i in range(net.n_readout)])
    return out


def generate_dataset(cfg: ExperimentConfig, n: int, out, seed: int = 0) -> Path:
    """Generate ``n`` input spike trains for the task into the binary container."""
    samples = list(task_samples(cfg, n, seed, split="train"))
    if not samples:
        raise ConfigError("nothing to generate (n = 0)")
    spikes = np.stack([s.x for s in samples])
    meta = {"task": cfg.task, "seed": seed, "n": len(samples), "T": int(spikes.shape[2]),
            "labels": [s.meta.get("label") for s in samples], "config": config_to_dict(cfg)}
    if cfg.task == "predictive_coding":
        meta["classes"] = [s.meta["classes"].tolist() for s in samples]
    return save_dataset(out, spikes, meta)


def evaluate_checkpoint(cfg: ExperimentConfig, checkpoint) -> dict:
    """Score a saved system on the held-out data of ``cfg.task`` (first seed)."""
    system, meta = load_checkpoint(checkpoint)
    seed = cfg.seeds[0]
    if cfg.task == "predictive_coding":
        test = gen_blob_sequence(Rng(seed, TEST_DATA), blob_params(cfg), cfg.test_T)
        return evaluate_predictive(system, cfg, test, seed)
    task = ImageTask(cfg)
    res = evaluate_reconstruction(system, task, seed, vdib_config(cfg, seed))
    res.pop("images")
    return res
