"""Versioned binary archive of named float64 arrays plus a JSON header.

Layout (little-endian)::

    b"OPTFSCKP" | u32 version | u32 header_len | header JSON | array data

The header records the vocabulary hash, caller metadata and, for every
array, its name, shape and byte offset into the data block.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError, HashMismatchError

MAGIC = b"OPTFSCKP"
VERSION = 1


def save_arrays(path, arrays: dict[str, np.ndarray], vocab_hash: str = "",
                metadata: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes(order="C"))
        offset += arr.nbytes
    header = json.dumps({"vocab_hash": vocab_hash, "metadata": metadata or {},
                         "arrays": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def load_arrays(path, expected_vocab_hash: str | None = None) -> tuple[dict[str, np.ndarray], dict]:
    """Return ``(arrays, header)``; raise if the vocabulary hash disagrees."""
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError:
        raise DataError(f"checkpoint not found: {path}") from None
    if raw[:8] != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", raw, 8)
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen])
    if expected_vocab_hash is not None and header["vocab_hash"] != expected_vocab_hash:
        raise HashMismatchError(f"{path}: checkpoint was written for a different vocabulary")
    body = memoryview(raw)[16 + hlen:]
    arrays = {}
    for e in header["arrays"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float64)
    return arrays, header
