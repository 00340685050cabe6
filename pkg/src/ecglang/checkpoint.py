"""Binary checkpoint format.

Layout (all little-endian)::

    b"ECGLCKPT" | u32 version | u64 meta_len | meta JSON
    u32 n_tensors | n x (u16 name_len, name, u8 dtype, u8 ndim, ndim x u64, payload)
    32-byte sha256 of everything before it

Writes go to a temp file that is renamed into place.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"ECGLCKPT"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1, np.dtype(np.int64): 2}


class CheckpointError(ValueError):
    pass


@dataclass
class ModelCheckpoint:
    params: dict[str, np.ndarray]
    config: dict
    config_hash: str
    step: int = 0
    epoch: int = 0
    best_val_metric: float | None = None
    moments_m: dict[str, np.ndarray] = field(default_factory=dict)
    moments_v: dict[str, np.ndarray] = field(default_factory=dict)
    rng_state: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)


def _write_tensor(buf: io.BytesIO, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    raw = name.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())


def save_checkpoint(ckpt: ModelCheckpoint, path: str | os.PathLike) -> Path:
    path = Path(path)
    meta = {
        "config": ckpt.config,
        "config_hash": ckpt.config_hash,
        "step": ckpt.step,
        "epoch": ckpt.epoch,
        "best_val_metric": ckpt.best_val_metric,
        "rng_state": ckpt.rng_state,
        "extra": ckpt.extra,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQ", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    tensors = [("param/" + k, v) for k, v in ckpt.params.items()]
    tensors += [("adam_m/" + k, v) for k, v in ckpt.moments_m.items()]
    tensors += [("adam_v/" + k, v) for k, v in ckpt.moments_v.items()]
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        _write_tensor(buf, name, arr)
    payload = buf.getvalue()
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.write(hashlib.sha256(payload).digest())
    os.replace(tmp, path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("corrupt checkpoint: unexpected end of file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str | os.PathLike, expected_hash: str | None = None) -> ModelCheckpoint:
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 32 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"corrupt checkpoint {path}: bad magic or truncated")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointError(f"corrupt checkpoint {path}: checksum mismatch (truncated or modified)")
    r = _Reader(payload)
    r.take(len(MAGIC))
    version, meta_len = r.unpack("<IQ")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    meta = json.loads(r.take(meta_len).decode("utf-8"))
    (count,) = r.unpack("<I")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam_m": {}, "adam_v": {}}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode("utf-8")
        code, ndim = r.unpack("<BB")
        if code not in _DTYPES:
            raise CheckpointError(f"corrupt checkpoint: dtype code {code}")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        dt = _DTYPES[code]
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(shape).copy()
        kind, _, key = name.partition("/")
        groups.setdefault(kind, {})[key] = arr
    if expected_hash is not None and meta["config_hash"] != expected_hash:
        raise CheckpointError(
            f"config hash mismatch: checkpoint has {meta['config_hash']}, expected {expected_hash}")
    return ModelCheckpoint(
        params=groups["param"], config=meta["config"], config_hash=meta["config_hash"],
        step=meta["step"], epoch=meta["epoch"], best_val_metric=meta["best_val_metric"],
        moments_m=groups["adam_m"], moments_v=groups["adam_v"], rng_state=meta["rng_state"],
        extra=meta.get("extra", {}),
    )
