"""Deterministic binary container: JSON metadata plus named float arrays.

Used for checkpoints. The writer is byte-deterministic for equal content
(sorted keys, sorted array names, fixed little-endian layout), so
save -> load -> save round-trips to identical bytes.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Tuple

import numpy as np

from .errors import DataError

MAGIC = b"DSKC"
VERSION = 1


def save_container(path, meta: dict, arrays: Dict[str, np.ndarray]) -> None:
    manifest = {}
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        dtype = arr.dtype.newbyteorder("<")
        data = arr.astype(dtype, copy=False).tobytes()
        manifest[name] = {
            "dtype": dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(data),
        }
        blobs.append(data)
        offset += len(data)
    header = json.dumps({"meta": meta, "arrays": manifest},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_container(path) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != MAGIC:
            raise DataError(f"{path}: not a checkpoint container")
        version, hlen = struct.unpack("<IQ", f.read(12))
        if version != VERSION:
            raise DataError(f"{path}: unsupported container version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        payload = f.read()
    arrays = {}
    for name, info in header["arrays"].items():
        start = info["offset"]
        raw = payload[start:start + info["nbytes"]]
        if len(raw) != info["nbytes"]:
            raise DataError(f"{path}: truncated array {name}")
        arrays[name] = np.frombuffer(raw, dtype=np.dtype(info["dtype"])) \
            .reshape(info["shape"]).copy()
    return header["meta"], arrays
