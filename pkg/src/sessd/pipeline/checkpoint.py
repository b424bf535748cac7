"""Binary checkpoints: ``SE3D`` magic, u32 version, u32-prefixed JSON layout, then little-endian float64s."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import ParamVector

MAGIC = b"SE3D"
VERSION = 1


class CheckpointError(ValueError):
    pass


def dumps(params: ParamVector, meta: dict | None = None) -> bytes:
    desc = {"layout": [[n, list(s)] for n, s in params.layout], "meta": meta or {}}
    blob = json.dumps(desc, sort_keys=True).encode()
    head = MAGIC + struct.pack("<II", VERSION, len(blob)) + blob
    return head + params.values.astype("<f8").tobytes()


def loads(data: bytes) -> tuple[ParamVector, dict]:
    if len(data) < 12 or data[:4] != MAGIC:
        raise CheckpointError("not an SE3D checkpoint")
    version, n = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    try:
        desc = json.loads(data[12:12 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad layout descriptor: {exc}") from None
    body = data[12 + n:]
    if len(body) % 8:
        raise CheckpointError("payload is not a whole number of float64 values")
    layout = tuple((name, tuple(shape)) for name, shape in desc["layout"])
    try:
        params = ParamVector(np.frombuffer(body, dtype="<f8").astype(np.float64), layout)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from None
    return params, desc.get("meta", {})


def save(path, params: ParamVector, meta: dict | None = None) -> None:
    Path(path).write_bytes(dumps(params, meta))


def load(path) -> tuple[ParamVector, dict]:
    return loads(Path(path).read_bytes())
