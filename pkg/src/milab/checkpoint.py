"""Checkpoint files: a JSON header followed by a little-endian float64 parameter blob.

Layout: 8 magic bytes, uint64 LE header length, UTF-8 JSON header, blob.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"MILABCK1"


def encode(state: dict[str, np.ndarray], meta: dict) -> bytes:
    names = list(state)
    blob = b"".join(np.ascontiguousarray(state[n], dtype="<f8").tobytes() for n in names)
    header = dict(meta)
    header["params"] = [{"name": n, "shape": list(state[n].shape)} for n in names]
    header["sha256"] = hashlib.sha256(blob).hexdigest()
    raw = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<Q", len(raw)) + raw + blob


def decode(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    if data[:8] != MAGIC:
        raise ValueError("not a checkpoint file (bad magic at byte offset 0)")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16 : 16 + hlen])
    blob = data[16 + hlen :]
    if hashlib.sha256(blob).hexdigest() != header["sha256"]:
        raise ValueError("checkpoint blob does not match its content hash")
    state, offset = {}, 0
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape))
        state[entry["name"]] = (
            np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(shape).astype(np.float64)
        )
        offset += 8 * count
    if offset != len(blob):
        raise ValueError(f"checkpoint blob has {len(blob) - offset} unexpected trailing bytes")
    return state, header


def save(path, state: dict[str, np.ndarray], meta: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(encode(state, meta))
    os.replace(tmp, path)
    return path


def load(path) -> tuple[dict[str, np.ndarray], dict]:
    return decode(Path(path).read_bytes())
