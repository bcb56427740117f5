"""Checkpoint container.

Layout (little-endian)::

    b"LGMS" | u32 version | u64 metadata length | metadata (UTF-8 JSON) | payload

The metadata holds a free-form ``meta`` object and a ``manifest`` list of
``{name, shape, dtype, offset, nbytes}`` entries addressing raw arrays in
the payload, which is the concatenation of the arrays in manifest order.
"""

from __future__ import annotations

import json
import os
import struct
from typing import Dict, Tuple

import numpy as np

MAGIC = b"LGMS"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


class CheckpointError(ValueError):
    pass


def _le_dtype(dtype: np.dtype) -> np.dtype:
    return np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).itemsize > 1 else np.dtype(dtype)


def dumps(arrays: Dict[str, np.ndarray], meta: dict) -> bytes:
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(arrays):
        arr = np.asarray(arrays[name])
        arr = np.ascontiguousarray(arr).reshape(arr.shape)  # keep 0-d arrays 0-d
        arr = arr.astype(_le_dtype(arr.dtype), copy=False)
        raw = arr.tobytes()
        manifest.append(
            {"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str, "offset": offset, "nbytes": len(raw)}
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"meta": meta, "manifest": manifest}, sort_keys=True, separators=(",", ":"))
    header = header.encode("utf-8")
    return _HEADER.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def loads(blob: bytes) -> Tuple[Dict[str, np.ndarray], dict]:
    if len(blob) < _HEADER.size:
        raise CheckpointError("truncated checkpoint")
    magic, version, n_meta = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError("bad magic bytes")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = _HEADER.size + n_meta
    header = json.loads(blob[_HEADER.size : start].decode("utf-8"))
    payload = memoryview(blob)[start:]
    arrays = {}
    end = 0
    for entry in header["manifest"]:
        if entry["offset"] != end:
            raise CheckpointError(f"manifest offsets overlap or leave gaps at {entry['name']}")
        end = entry["offset"] + entry["nbytes"]
        if end > len(payload):
            raise CheckpointError("payload shorter than manifest")
        dtype = np.dtype(entry["dtype"])
        arr = np.frombuffer(payload[entry["offset"] : end], dtype=dtype).reshape(tuple(entry["shape"]))
        arrays[entry["name"]] = arr.astype(dtype.newbyteorder("="), copy=True)
    if end != len(payload):
        raise CheckpointError("payload size does not match manifest")
    return arrays, header["meta"]


def save(path: str | os.PathLike, arrays: Dict[str, np.ndarray], meta: dict):
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(arrays, meta))
    os.replace(tmp, path)


def load(path: str | os.PathLike) -> Tuple[Dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        return loads(fh.read())
