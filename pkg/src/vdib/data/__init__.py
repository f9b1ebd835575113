from .aedat import Crop, EventStream, bin_events, build_aedat, parse_aedat, read_aedat, scan_mnistdvs
from .blobs import BlobProcessParams, LabeledSequence, blob_stream, gen_blob_sequence, pair_index
from .container import load_dataset, pack_spikes, save_dataset, unpack_spikes
from .mnist import (
    build_reference,
    class_exemplars,
    encode_image,
    load_mnist,
    parse_idx,
    poisson_encode,
    read_idx,
    ttfs_encode,
)

__all__ = [
    "BlobProcessParams", "Crop", "EventStream", "LabeledSequence", "bin_events", "blob_stream",
    "build_aedat", "build_reference", "class_exemplars", "encode_image", "gen_blob_sequence",
    "load_dataset", "load_mnist", "pack_spikes", "pair_index", "parse_aedat", "parse_idx",
    "poisson_encode", "read_aedat", "read_idx", "save_dataset", "scan_mnistdvs", "ttfs_encode",
    "unpack_spikes",
]
