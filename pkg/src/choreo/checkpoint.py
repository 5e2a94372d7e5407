"""Checkpoint files: a JSON manifest followed by little-endian float32 blobs.

Layout::

    b"CKPT" | u32 version | u64 manifest bytes | manifest (UTF-8 JSON) | payload

The manifest lists ``[name, shape]`` for every blob in payload order. Model
parameters, optimizer moments and any other float arrays all go through the
same table; generator states and counters live in the manifest as JSON.
Writes go to a temporary file in the target directory and are renamed into
place, so a crash never leaves a half-written checkpoint behind.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError, StageOrderError

MAGIC = b"CKPT"
VERSION = 1
_HEADER = struct.Struct("<4sIQ")


@dataclass
class Checkpoint:
    kind: str
    arrays: dict[str, np.ndarray]
    meta: dict = field(default_factory=dict)

    def subset(self, prefix: str) -> dict[str, np.ndarray]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.arrays.items() if k.startswith(prefix)}


def encode(ckpt: Checkpoint) -> bytes:
    names = list(ckpt.arrays)
    blobs = [np.ascontiguousarray(ckpt.arrays[k], dtype="<f4") for k in names]
    manifest = {
        "kind": ckpt.kind,
        "tensors": [[k, list(b.shape)] for k, b in zip(names, blobs)],
        "meta": ckpt.meta,
    }
    text = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    return _HEADER.pack(MAGIC, VERSION, len(text)) + text + b"".join(b.tobytes() for b in blobs)


def decode(raw: bytes, source: str = "<bytes>") -> Checkpoint:
    if len(raw) < _HEADER.size:
        raise DataError(f"{source}: truncated checkpoint header at byte offset {len(raw)}")
    magic, version, n = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise DataError(f"{source}: bad checkpoint magic {magic!r} at byte offset 0")
    if version != VERSION:
        raise DataError(f"{source}: unsupported checkpoint version {version} at byte offset 4")
    end = _HEADER.size + n
    if len(raw) < end:
        raise DataError(f"{source}: manifest truncated at byte offset {len(raw)} (expected {end})")
    try:
        manifest = json.loads(raw[_HEADER.size : end])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{source}: unreadable manifest at byte offset {_HEADER.size}: {exc}") from None
    sizes = [int(np.prod(shape, dtype=np.int64)) for _, shape in manifest["tensors"]]
    expected = 4 * sum(sizes)
    if len(raw) - end != expected:
        raise DataError(
            f"{source}: payload is {len(raw) - end} bytes at byte offset {end}, manifest describes {expected}"
        )
    arrays, offset = {}, end
    for (name, shape), size in zip(manifest["tensors"], sizes):
        arrays[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * size
    return Checkpoint(manifest["kind"], arrays, manifest.get("meta", {}))


def save(path, ckpt: Checkpoint) -> None:
    path = Path(path)
    data = encode(ckpt)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path, kind: str | None = None) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        what = f"{kind} checkpoint" if kind else "checkpoint"
        raise StageOrderError(f"missing {what}: {path} (run the earlier pipeline stage first)")
    ckpt = decode(path.read_bytes(), str(path))
    if kind is not None and ckpt.kind != kind:
        raise DataError(f"{path}: expected a {kind} checkpoint, found {ckpt.kind}")
    return ckpt


# ---------------------------------------------------------------------------
# Helpers for module / optimizer / generator state
# ---------------------------------------------------------------------------


def prefixed(prefix: str, arrays: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {f"{prefix}{k}": v for k, v in arrays.items()}


def optimizer_arrays(opt) -> dict[str, np.ndarray]:
    out = {}
    for k in opt.params:
        out[f"m.{k}"] = opt.m[k]
        out[f"v.{k}"] = opt.v[k]
    return out


def optimizer_meta(opt) -> dict:
    return {"step": opt.step_count, "lr": opt.lr}


def restore_optimizer(opt, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    opt.load_state_dict(
        {
            "step": meta["step"],
            "lr": meta["lr"],
            "m": {k: arrays[f"m.{k}"] for k in opt.params},
            "v": {k: arrays[f"v.{k}"] for k in opt.params},
        }
    )


def rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def restore_rng(rng: np.random.Generator, state: dict) -> None:
    rng.bit_generator.state = state
