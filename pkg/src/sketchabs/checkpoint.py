"""Versioned checkpoint container.

Layout: a magic line, one line of canonical JSON (format version, digests,
model shapes, array table, payload checksum), then the parameter arrays as
raw little-endian float32 in declaration order.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .model import PARAM_ORDER, ModelConfig, ModelParams

MAGIC = b"SKETCHABS-CHECKPOINT\n"
FORMAT_VERSION = 1
DTYPE = "<f4"


class CheckpointError(ValueError):
    pass


def to_bytes(params: ModelParams, meta: dict | None = None) -> bytes:
    payload = b"".join(np.ascontiguousarray(params[n], dtype=DTYPE).tobytes()
                       for n in PARAM_ORDER)
    header = {
        "format_version": FORMAT_VERSION,
        "dtype": DTYPE,
        "model": asdict(params.config),
        "arrays": [[n, list(params[n].shape)] for n in PARAM_ORDER],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "meta": meta or {},
    }
    return MAGIC + json.dumps(header, sort_keys=True).encode() + b"\n" + payload


def from_bytes(blob: bytes, source="<bytes>"):
    """Returns ``(params, header)``; raises CheckpointError on any mismatch."""
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{source}: not a sketchabs checkpoint")
    rest = blob[len(MAGIC):]
    end = rest.find(b"\n")
    if end < 0:
        raise CheckpointError(f"{source}: truncated header")
    try:
        header = json.loads(rest[:end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{source}: unreadable header ({exc})") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{source}: format version {header.get('format_version')} != {FORMAT_VERSION}")
    payload = rest[end + 1:]
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{source}: payload digest mismatch (corrupt checkpoint)")
    config = ModelConfig(**header["model"])
    expected = config.shapes()
    arrays, offset = {}, 0
    for name, shape in header["arrays"]:
        shape = tuple(shape)
        if expected.get(name) != shape:
            raise CheckpointError(f"{source}: array {name} has unexpected shape {shape}")
        count = int(np.prod(shape))
        arrays[name] = np.frombuffer(payload, dtype=DTYPE, count=count,
                                     offset=offset).reshape(shape).astype(np.float64)
        offset += 4 * count
    if offset != len(payload):
        raise CheckpointError(f"{source}: payload size does not match array table")
    return ModelParams(config, arrays), header


def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(to_bytes(params, meta))
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def load_checkpoint(path):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise OSError(f"cannot read checkpoint {path}: {exc}") from exc
    return from_bytes(blob, str(path))
