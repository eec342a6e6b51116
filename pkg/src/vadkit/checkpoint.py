"""Checkpoint files: a JSON header followed by a float64 little-endian payload.

The header records the format version, a model kind tag, free-form metadata,
and the name/shape of every parameter array in payload order. Loading is
bit-exact for finite float64 parameters.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .neural import Params

CHECKPOINT_VERSION = 1

_LEN = struct.Struct("<I")


def save_checkpoint(
    path: str | Path,
    kind: str,
    params: Params,
    meta: dict | None = None,
) -> None:
    """Write parameters in insertion order with a JSON header describing them."""
    entries = []
    chunks = []
    for name, value in params.items():
        arr = np.ascontiguousarray(value, dtype="<f8")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite parameter {name!r}")
        entries.append({"name": name, "shape": list(arr.shape)})
        chunks.append(arr.tobytes())
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": kind,
        "meta": meta or {},
        "params": entries,
    }
    blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode()
    Path(path).write_bytes(_LEN.pack(len(blob)) + blob + b"".join(chunks))


def load_checkpoint(path: str | Path, kind: str | None = None) -> tuple[Params, dict]:
    """Read back (params, meta); raises if the file is malformed or the
    model kind does not match the expected one."""
    raw = Path(path).read_bytes()
    if len(raw) < _LEN.size:
        raise ValueError(f"truncated checkpoint: {path}")
    (header_len,) = _LEN.unpack_from(raw)
    if len(raw) < _LEN.size + header_len:
        raise ValueError(f"truncated checkpoint header: {path}")
    try:
        header = json.loads(raw[_LEN.size : _LEN.size + header_len])
    except json.JSONDecodeError as exc:
        raise ValueError(f"corrupt checkpoint header: {path}: {exc}") from exc
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
    if kind is not None and header.get("kind") != kind:
        raise ValueError(
            f"checkpoint {path} holds a {header.get('kind')!r} model, expected {kind!r}"
        )
    params: Params = {}
    offset = _LEN.size + header_len
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(raw):
            raise ValueError(f"truncated checkpoint payload: {path}")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset)
        params[entry["name"]] = arr.reshape(shape).copy()
        offset = end
    return params, header.get("meta", {})
