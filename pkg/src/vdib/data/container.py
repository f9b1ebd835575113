"""Bit-packed binary container for generated spike datasets.

Layout (big-endian): magic ``VDSPK`` + version byte, u8 ndim, ndim x u32
dims, then ``np.packbits`` of the flattened array. A JSON sidecar next to
the file records how the data was generated.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from ..errors import ContractViolation, ParseError

MAGIC = b"VDSPK"
VERSION = 1


def pack_spikes(spikes) -> bytes:
    a = np.asarray(spikes)
    if not np.all((a == 0) | (a == 1)):
        raise ContractViolation("container only stores binary arrays")
    if a.ndim > 255:
        raise ContractViolation("too many dimensions")
    head = MAGIC + bytes([VERSION, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    return head + np.packbits(a.astype(np.uint8).ravel()).tobytes()


def unpack_spikes(data: bytes) -> np.ndarray:
    if not data.startswith(MAGIC):
        raise ParseError("not a spike container (bad magic)", 0)
    if len(data) < len(MAGIC) + 2:
        raise ParseError("header truncated", len(data))
    version, ndim = data[len(MAGIC)], data[len(MAGIC) + 1]
    if version != VERSION:
        raise ParseError(f"unsupported container version {version}", len(MAGIC))
    off = len(MAGIC) + 2
    if len(data) < off + 4 * ndim:
        raise ParseError("dimension table truncated", len(data))
    dims = struct.unpack(f">{ndim}I", data[off:off + 4 * ndim])
    off += 4 * ndim
    n = math.prod(dims)
    nbytes = (n + 7) // 8
    if len(data) != off + nbytes:
        raise ParseError(f"payload is {len(data) - off} bytes, expected {nbytes}", off)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, offset=off), count=n)
    return bits.reshape(dims).astype(np.float64)


def sidecar_path(path) -> Path:
    p = Path(path)
    return p.with_name(p.name + ".json")


def save_dataset(path, spikes, meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(pack_spikes(spikes))
    sidecar_path(path).write_text(json.dumps({"format_version": VERSION, **meta}, indent=2,
                                             sort_keys=True))
    return path


def load_dataset(path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    spikes = unpack_spikes(path.read_bytes())
    side = sidecar_path(path)
    meta = json.loads(side.read_text()) if side.exists() else {}
    return spikes, meta
