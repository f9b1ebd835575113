"""AEDAT 2.0 event files from a DVS128 sensor, and binning into spike trains."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import ContractViolation, ParseError

MAGIC = b"#!AER-DAT2.0"
SENSOR_SIZE = 128
RECORD = np.dtype([("addr", ">u4"), ("ts", ">u4")])


@dataclass
class EventStream:
    """Events with timestamps in microseconds relative to the first event."""

    t: np.ndarray  # int64
    x: np.ndarray  # int64, 0..127
    y: np.ndarray
    polarity: np.ndarray  # +1 / -1

    def __len__(self):
        return int(self.t.size)

    @classmethod
    def empty(cls) -> "EventStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z.copy(), z.copy(), z.copy())


def _header_end(data: bytes) -> int:
    if not data.startswith(MAGIC):
        raise ParseError("missing #!AER-DAT2.0 magic", 0)
    pos = 0
    while pos < len(data) and data[pos:pos + 1] == b"#":
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise ParseError("unterminated header line", pos)
        pos = nl + 1
    return pos


def decode_address(addr):
    """DVS128 layout: bit 0 polarity, bits 1-7 x, bits 8-14 y."""
    addr = np.asarray(addr, dtype=np.int64)
    x = (addr >> 1) & 0x7F
    y = (addr >> 8) & 0x7F
    pol = np.where(addr & 1, 1, -1)
    return x, y, pol


def encode_address(x, y, polarity) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    y = np.asarray(y, dtype=np.int64)
    p = (np.asarray(polarity) > 0).astype(np.int64)
    return (y << 8) | (x << 1) | p


def parse_aedat(data: bytes) -> EventStream:
    data = bytes(data)
    start = _header_end(data)
    body = len(data) - start
    if body % 8:
        raise ParseError(f"body of {body} bytes is not a whole number of 8-byte records",
                         start + body - body % 8)
    if body == 0:
        return EventStream.empty()
    rec = np.frombuffer(data, dtype=RECORD, offset=start)
    ts = rec["ts"].astype(np.int64)
    back = np.flatnonzero(np.diff(ts) < 0)
    if back.size:
        i = int(back[0]) + 1
        raise ParseError(f"timestamp wrap: {ts[i]} after {ts[i - 1]}", start + 8 * i + 4)
    x, y, pol = decode_address(rec["addr"])
    return EventStream(ts - ts[0], x, y, pol)


def build_aedat(t, x, y, polarity, header_lines=()) -> bytes:
    """Serialize events back to AEDAT 2.0 (used for fixtures and round trips)."""
    head = MAGIC + b"\r\n" + b"".join(b"# " + h.encode() + b"\r\n" for h in header_lines)
    rec = np.empty(len(t), dtype=RECORD)
    rec["addr"] = encode_address(x, y, polarity)
    rec["ts"] = np.asarray(t, dtype=np.int64)
    return head + rec.tobytes()


def read_aedat(path) -> EventStream:
    return parse_aedat(Path(path).read_bytes())


@dataclass(frozen=True)
class Crop:
    x0: int = 51
    y0: int = 51
    width: int = 26
    height: int = 26

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ContractViolation("crop must be at least 1x1")
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.width > SENSOR_SIZE \
                or self.y0 + self.height > SENSOR_SIZE:
            raise ContractViolation(f"crop {self} leaves the {SENSOR_SIZE}x{SENSOR_SIZE} sensor")


def bin_events(stream: EventStream, bin_ms: float = 10.0, duration_ms: float = 2000.0,
               crop: Crop = Crop()) -> np.ndarray:
    """Binary (width*height, T) train; a pixel-bin is 1 if any event of either polarity hits it."""
    if not bin_ms > 0 or not duration_ms > 0:
        raise ContractViolation("bin and duration must be positive")
    T = int(round(duration_ms / bin_ms))
    if T < 1:
        raise ContractViolation("duration shorter than one bin")
    out = np.zeros((crop.width * crop.height, T))
    if len(stream) == 0:
        return out
    b = (stream.t // int(round(bin_ms * 1000))).astype(np.int64)
    cx = stream.x - crop.x0
    cy = stream.y - crop.y0
    keep = (b < T) & (cx >= 0) & (cx < crop.width) & (cy >= 0) & (cy < crop.height)
    out[cy[keep] * crop.width + cx[keep], b[keep]] = 1.0
    return out


_DIGIT = re.compile(r"mnist_(\d)_")


def scan_mnistdvs(root, scale: str | None = None) -> list[tuple[Path, int]]:
    """(file, digit) for every ``mnist_<d>_...aedat`` under ``root``, sorted by path."""
    out = []
    for p in sorted(Path(root).rglob("*.aedat")):
        if scale is not None and scale not in p.parts and scale not in p.name:
            continue
        m = _DIGIT.search(p.name)
        if m:
            out.append((p, int(m.group(1))))
    if not out:
        raise FileNotFoundError(f"no MNIST-DVS .aedat files under {root}")
    return out
