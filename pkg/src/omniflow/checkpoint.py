"""Checkpoint file: magic, little-endian u64 header length, JSON header, raw f64 tensors.

Tensors follow the header in the order listed under ``"tensors"``, each as
little-endian float64 in C order.
"""
import json
import struct
from dataclasses import asdict

import numpy as np

from .dit import DiTConfig, DiTParams, ExpertRouter

MAGIC = b"OMNIFLW1"
FORMAT_VERSION = 1


def save_checkpoint(path, router, extra=None):
    entries = []
    blobs = []
    for expert, params in router.experts().items():
        for name, arr in params.tensors.items():
            entries.append({"expert": expert, "name": name, "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    header = {
        "format_version": FORMAT_VERSION,
        "model": asdict(router.low_noise.config),
        "u_threshold": router.u_threshold,
        "extra": extra or {},
        "tensors": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Return ``(router, header)``."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ValueError(f"{path} is not a checkpoint file")
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
        config = DiTConfig(**header["model"])
        tensors = {"low": {}, "high": {}}
        for entry in header["tensors"]:
            count = int(np.prod(entry["shape"], dtype=np.int64))
            data = fh.read(8 * count)
            if len(data) != 8 * count:
                raise ValueError("checkpoint truncated")
            arr = np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(entry["shape"])
            tensors[entry["expert"]][entry["name"]] = arr
        if fh.read(1):
            raise ValueError("trailing bytes after last tensor")
    router = ExpertRouter(DiTParams(config, tensors["low"]), DiTParams(config, tensors["high"]),
                          header["u_threshold"])
    return router, header
