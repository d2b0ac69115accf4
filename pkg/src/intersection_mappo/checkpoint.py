"""Versioned checkpoint container: one-line text manifest followed by raw little-endian arrays.

Layout::

    INTERSECTION-MAPPO-CHECKPOINT <version>\\n
    <manifest JSON on one line>\\n
    <payload bytes>

The manifest lists every array (dtype, shape, byte offset) plus the payload's
SHA-256 and length, so truncation or bit-rot is detected before any state is
handed back.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = "INTERSECTION-MAPPO-CHECKPOINT"
FORMAT_VERSION = 1
_DTYPES = {"f8": "<f8", "i8": "<i8", "b1": "|b1"}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.bool_:
        return "b1"
    if np.issubdtype(arr.dtype, np.integer):
        return "i8"
    if np.issubdtype(arr.dtype, np.floating):
        return "f8"
    raise CheckpointError(f"unsupported array dtype {arr.dtype}")


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    path = Path(path)
    entries = []
    chunks = []
    offset = 0
    for name, arr in checkpoint.arrays.items():
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "dtype": code, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    payload = b"".join(chunks)
    manifest = {
        "version": checkpoint.version,
        "config": checkpoint.config_text,
        "meta": checkpoint.meta,
        "arrays": entries,
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    header = f"{MAGIC} {checkpoint.version}\n{json.dumps(manifest, sort_keys=True)}\n".encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    first, sep, rest = raw.partition(b"\n")
    parts = first.decode(errors="replace").split()
    if not sep or len(parts) != 2 or parts[0] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (corrupt header)")
    if parts[1] != str(FORMAT_VERSION):
        raise CheckpointError(f"{path}: checkpoint format version {parts[1]} is not supported (expected {FORMAT_VERSION})")
    line, sep, payload = rest.partition(b"\n")
    try:
        if not sep:
            raise ValueError("missing manifest terminator")
        manifest = json.loads(line)
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt manifest ({exc})") from None
    if len(payload) != manifest["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, manifest declares {manifest['payload_bytes']} (truncated?)")
    if hashlib.sha256(payload).hexdigest() != manifest["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    arrays = {}
    for entry in manifest["arrays"]:
        buf = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(buf, dtype=_DTYPES[entry["dtype"]]).reshape(entry["shape"]).copy()
    return Checkpoint(manifest["config"], arrays, manifest["meta"], manifest["version"])
