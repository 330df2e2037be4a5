"""Versioned binary model checkpoints.

Layout (all integers little-endian)::

    b"KLCK"                magic
    uint16                 format version
    uint32                 header length L
    L bytes                UTF-8 JSON header: arch, input_shape, block_size,
                           key_fingerprint, num_params
    num_params * float32   parameters, little-endian

Only the key fingerprint is stored, never the key.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .nettrain import Model

MAGIC = b"KLCK"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    model: Model
    block_size: Optional[int] = None
    key_fingerprint: Optional[str] = None


def save_checkpoint(path: str | os.PathLike, model: Model, block_size: int | None = None,
                    key_fingerprint: str | None = None) -> None:
    header = {
        "arch": [list(s) for s in model.arch],
        "input_shape": list(model.input_shape),
        "block_size": block_size,
        "key_fingerprint": key_fingerprint,
        "num_params": model.num_params,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<HI", FORMAT_VERSION, len(blob)))
        f.write(blob)
        f.write(model.params.astype("<f4").tobytes())


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"not a keylock checkpoint: {path}")
    version, hlen = struct.unpack_from("<HI", raw, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<HI")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    n = header["num_params"]
    body = raw[start + hlen:]
    if len(body) != 4 * n:
        raise ValueError(f"truncated checkpoint: {path}")
    params = np.frombuffer(body, dtype="<f4").astype(np.float32)
    model = Model([tuple(s) for s in header["arch"]], tuple(header["input_shape"]),
                  np.float32, params=params)
    return Checkpoint(model, header["block_size"], header["key_fingerprint"])
