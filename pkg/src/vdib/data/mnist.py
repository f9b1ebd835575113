"""IDX parsing and image-to-spike encoders."""

from __future__ import annotations

import gzip
import struct
import zlib
from pathlib import Path

import numpy as np

from ..errors import ContractViolation, ParseError
from ..mathcore import Rng
from .blobs import LabeledSequence

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MAX_IDX_ELEMENTS = 1 << 31
REFERENCE_MODES = ("final_step", "every_step")

SPLIT_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _maybe_gunzip(data: bytes) -> bytes:
    if data[:2] != b"\x1f\x8b":
        return data
    try:
        return gzip.decompress(data)
    except (OSError, EOFError, zlib.error) as exc:
        raise ParseError(f"corrupt gzip stream: {exc}", 0) from None


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an IDX images (0x803) or labels (0x801) file, raw or gzip-compressed.

    Images come back as float64 in [0, 1] with shape (count, rows, cols);
    labels as int64 digits 0..9.
    """
    data = _maybe_gunzip(bytes(data))
    if len(data) < 4:
        raise ParseError("file shorter than the 4-byte magic", len(data))
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise ParseError(f"unknown IDX magic 0x{magic:08x}", 0)
    header = 4 + 4 * ndim
    if len(data) < header:
        raise ParseError(f"header truncated: need {header} bytes, have {len(data)}", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:header])
    n = 1
    for d in dims:
        n *= d
    if n > MAX_IDX_ELEMENTS:
        raise ParseError(f"dimensions {dims} overflow the element limit", 4)
    end = header + n
    if len(data) < end:
        item = n // dims[0]  # dims[0] > 0 here since n > 0
        have = (len(data) - header) // item
        raise ParseError(
            f"payload truncated: header declares {dims[0]} items ({n} bytes), "
            f"payload holds {have}", len(data))
    if len(data) > end:
        raise ParseError(f"{len(data) - end} trailing bytes after the declared payload", end)
    payload = np.frombuffer(data, dtype=np.uint8, count=n, offset=header)
    if ndim == 1:
        labels = payload.astype(np.int64)
        bad = np.flatnonzero(labels > 9)
        if bad.size:
            raise ParseError(f"label value {labels[bad[0]]} outside 0..9", header + int(bad[0]))
        return labels
    return payload.reshape(dims).astype(np.float64) / 255.0


def read_idx(path) -> np.ndarray:
    return parse_idx(Path(path).read_bytes())


def _find(root: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        p = root / name
        if p.is_file():
            return p
    raise FileNotFoundError(f"{stem}[.gz] not found under {root}")


def load_mnist(root, split: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Images flattened to (count, 784) in [0, 1] and their labels."""
    if split not in SPLIT_FILES:
        raise ContractViolation(f"split must be one of {tuple(SPLIT_FILES)}")
    root = Path(root)
    img_name, lab_name = SPLIT_FILES[split]
    images = read_idx(_find(root, img_name))
    labels = read_idx(_find(root, lab_name))
    if images.ndim != 3 or labels.ndim != 1:
        raise ParseError("image/label files swapped or of the wrong kind", 0)
    if images.shape[0] != labels.shape[0]:
        raise ParseError(f"{images.shape[0]} images but {labels.shape[0]} labels", 0)
    return images.reshape(images.shape[0], -1), labels


def _check_image(image) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64).ravel()
    if np.any(img < 0.0) or np.any(img > 1.0) or not np.all(np.isfinite(img)):
        raise ContractViolation("intensities must lie in [0, 1]")
    return img


def poisson_encode(image, T: int, rng: Rng, gain: float = 0.5) -> np.ndarray:
    """Independent Bernoulli(gain * intensity) spikes per pixel and step, shape (N, T)."""
    if not 0.0 < gain <= 1.0:
        raise ContractViolation(f"gain must lie in (0, 1], got {gain}")
    img = _check_image(image)
    return (rng.random((img.size, T)) < gain * img[:, None]).astype(np.float64)


def ttfs_times(image, T: int) -> np.ndarray:
    """1-based first-spike times, 0 for silent pixels. Rounds halves up."""
    img = _check_image(image)
    t = 1 + np.floor((1.0 - img) * (T - 1) + 0.5).astype(np.int64)
    return np.where(img > 0.0, t, 0)


def ttfs_encode(image, T: int) -> np.ndarray:
    """At most one spike per pixel; brighter pixels fire earlier."""
    times = ttfs_times(image, T)
    x = np.zeros((times.size, T))
    on = np.flatnonzero(times)
    x[on, times[on] - 1] = 1.0
    return x


def build_reference(image, T: int, mode: str = "final_step") -> tuple[np.ndarray, np.ndarray]:
    """Reference r (N_R x T) and its defined-step mask."""
    img = np.asarray(image, dtype=np.float64).ravel()
    if mode not in REFERENCE_MODES:
        raise ContractViolation(f"reference mode must be one of {REFERENCE_MODES}")
    r = np.zeros((img.size, T))
    mask = np.zeros(T, dtype=bool)
    if mode == "final_step":
        r[:, -1] = img
        mask[-1] = True
    else:
        r[:] = img[:, None]
        mask[:] = True
    return r, mask


def encode_image(image, T: int, encoding: str, rng: Rng | None = None, gain: float = 0.5,
                 reference_mode: str = "final_step", label: int | None = None,
                 reference=None) -> LabeledSequence:
    """Encode one image as a training sample; ``reference`` defaults to the image itself."""
    if encoding == "poisson":
        if rng is None:
            raise ContractViolation("poisson encoding needs an rng")
        x = poisson_encode(image, T, rng, gain)
    elif encoding == "ttfs":
        x = ttfs_encode(image, T)
    else:
        raise ContractViolation(f"unknown encoding {encoding!r}; expected poisson or ttfs")
    r, mask = build_reference(image if reference is None else reference, T, reference_mode)
    return LabeledSequence(x, r, mask, {"label": label})


def class_exemplars(images: np.ndarray, labels: np.ndarray) -> dict[int, np.ndarray]:
    """First training image of each class, in file order."""
    out = {}
    for img, lab in zip(images, labels):
        if int(lab) not in out:
            out[int(lab)] = img
    return out
