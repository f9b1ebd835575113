"""Versioned checkpoints: all weights in an ``.npz`` plus JSON metadata.

Round trips are bit-exact; metadata carries the architecture needed to rebuild
the system and a hash of the resolved config that produced it.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .decoder import DecoderModel
from .encoder import EncoderInit, EncoderNetwork, FilterParams
from .errors import ParseError
from .trainer import VdibSystem

CHECKPOINT_VERSION = 1


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def _architecture(system: VdibSystem) -> dict:
    net, dec = system.encoder, system.decoder
    return {
        "encoder": {
            "n_inputs": net.n_inputs,
            "hidden_sizes": net.hidden_sizes,
            "n_readout": net.n_readout,
            "params": asdict(net.params),
            "hidden_params": asdict(net.hidden_params),
            "surrogate": net.surrogate,
            "theta": net.theta,
            "init": asdict(net.init),
        },
        "decoder": {"kind": dec.kind, "likelihood": dec.likelihood, "n_in": dec.n_in,
                    "n_out": dec.n_out, "hidden_size": dec.hidden_size},
        "decoding": system.decoding,
    }


def save_checkpoint(path, system: VdibSystem, config: dict | None = None,
                    iteration: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"enc.{k}": v for k, v in system.encoder.parameters().items()}
    arrays.update({f"fb.{i}": B for i, B in enumerate(system.encoder.feedback)})
    arrays.update({f"dec.{k}": v for k, v in system.decoder.params.items()})
    meta = {
        "version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "baseline": system.baseline,
        "clip_events": system.clip_events,
        "architecture": _architecture(system),
        "config": config or {},
        "config_hash": config_hash(config or {}),
    }
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
    return path


def load_checkpoint(path) -> tuple[VdibSystem, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            arrays = {k: z[k] for k in z.files if k != "__meta__"}
    except (ValueError, KeyError, OSError, zipfile.BadZipFile) as exc:
        raise ParseError(f"unreadable checkpoint: {exc}", 0) from None
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ParseError(f"unsupported checkpoint version {meta.get('version')}", 0)
    arch = meta["architecture"]
    e = arch["encoder"]
    net = EncoderNetwork(e["n_inputs"], e["hidden_sizes"], e["n_readout"],
                         FilterParams(**e["params"]), hidden_params=FilterParams(**e["hidden_params"]),
                         surrogate=e["surrogate"], theta=e["theta"], init=EncoderInit(**e["init"]))
    params = net.parameters()
    for k, v in params.items():
        v[...] = arrays[f"enc.{k}"]  # in place, keeps hidden W Fortran-ordered
    for i, B in enumerate(net.feedback):
        B[...] = arrays[f"fb.{i}"]
    d = arch["decoder"]
    dec = DecoderModel(d["kind"], d["likelihood"], d["n_in"], d["n_out"], d["hidden_size"],
                       {k[4:]: arrays[k].copy() for k in arrays if k.startswith("dec.")})
    system = VdibSystem(net, dec, arch["decoding"], meta["baseline"], meta["clip_events"])
    return system, meta
