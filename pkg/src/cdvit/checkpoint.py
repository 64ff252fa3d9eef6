"""Versioned binary checkpoint container.

Layout: magic `CDN1`, then a u32-length-prefixed UTF-8 JSON metadata
record (model kind, architecture config, training info), then a u32
parameter count followed by one blob per parameter: u32 name length,
UTF-8 name, u32 ndim, u32 dims, and little-endian float64 data. All
integers are little-endian.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .config import ModelConfig
from .errors import CheckpointError

MAGIC = b"CDN1"


def save_checkpoint(path: str | Path, kind: str, config: ModelConfig,
                    params: dict[str, np.ndarray], meta: dict | None = None) -> None:
    header = {"kind": kind, "config": config.to_dict(), "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    out = bytearray()
    out += MAGIC
    out += struct.pack("<I", len(blob))
    out += blob
    out += struct.pack("<I", len(params))
    for name in sorted(params):
        data = np.ascontiguousarray(params[name], dtype="<f8")
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += struct.pack("<I", data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += data.tobytes()
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns (header, params). header["config"] is a plain dict; use
    `config_from_header` to get a ModelConfig."""
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    off = 4

    def take(fmt: str):
        nonlocal off
        size = struct.calcsize(fmt)
        if off + size > len(raw):
            raise CheckpointError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, off)
        off += size
        return vals

    (hlen,) = take("<I")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    off += hlen

    (count,) = take("<I")
    params: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = take("<I")
        name = raw[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        nbytes = size * 8
        if off + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data for {name!r}")
        params[name] = np.frombuffer(raw, dtype="<f8", count=size,
                                     offset=off).reshape(shape).copy()
        off += nbytes
    return header, params


def config_from_header(header: dict) -> ModelConfig:
    try:
        return ModelConfig(**header["config"]).validate()
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint header missing config fields: {exc}") from exc
