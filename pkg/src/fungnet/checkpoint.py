"""FGNT checkpoint files.

Layout, all integers little-endian::

    b"FGNT" | u8 version (1) | u32 tensor count
    per tensor: u32 name length | UTF-8 name | u8 dtype (0=float32, 1=float64)
                | u8 rank | rank x u64 extents | raw row-major values
    u32 provenance length | UTF-8 JSON provenance

The provenance JSON is written with sorted keys and carries no timestamp, so
saving the same model twice produces identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = b"FGNT"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class CheckpointError(ValueError):
    pass


def atomic_write(path, data) -> None:
    """Write to a sibling temp file and rename over ``path`` on success."""
    path = Path(path)
    mode = "wb" if isinstance(data, (bytes, bytearray)) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode, **({} if mode == "wb" else {"newline": "", "encoding": "utf-8"})) as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def encode(tensors: Mapping[str, np.ndarray], provenance: Mapping) -> bytes:
    parts = [MAGIC, struct.pack("<BI", VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value)
        if arr.dtype not in _CODES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{name}: refusing to save non-finite values")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", _CODES[arr.dtype], arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=_DTYPES[_CODES[arr.dtype]]).tobytes())
    meta = json.dumps(dict(provenance), sort_keys=True).encode("utf-8")
    parts.append(struct.pack("<I", len(meta)))
    parts.append(meta)
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"corrupt checkpoint: truncated while reading {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes):
    """Return ``(tensors, provenance)``; raises :class:`CheckpointError` on any inconsistency."""
    if buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file")
    r = _Reader(buf)
    r.take(4, "magic")
    (version,) = r.unpack("<B", "version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {VERSION})")
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for i in range(count):
        label = f"tensor record {i}"
        (name_len,) = r.unpack("<I", f"{label} name length")
        try:
            name = r.take(name_len, f"{label} name").decode("utf-8")
        except UnicodeDecodeError:
            raise CheckpointError(f"corrupt checkpoint: {label} name is not UTF-8") from None
        label = f"tensor {name!r}"
        code, rank = r.unpack("<BB", f"{label} header")
        if code not in _DTYPES:
            raise CheckpointError(f"corrupt checkpoint: {label} has unknown dtype code {code}")
        shape = r.unpack(f"<{rank}Q", f"{label} shape")
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        raw = r.take(nbytes, f"{label} values")
        if name in tensors:
            raise CheckpointError(f"corrupt checkpoint: duplicate tensor name {name!r}")
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    (meta_len,) = r.unpack("<I", "provenance length")
    meta = r.take(meta_len, "provenance block")
    if r.pos != len(buf):
        raise CheckpointError(f"corrupt checkpoint: {len(buf) - r.pos} trailing bytes")
    try:
        provenance = json.loads(meta.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint: provenance block is not JSON ({e})") from None
    return tensors, provenance


def save_checkpoint(model, path, seed: int = 0, extra: Mapping = None) -> None:
    """Write every parameter and batchnorm buffer of ``model``."""
    provenance = {
        "arch": model.arch,
        "num_classes": model.num_classes,
        "seed": int(seed),
        "width_multiplier": float(getattr(model, "width_multiplier", 1.0)),
    }
    if extra:
        provenance.update(extra)
    atomic_write(path, encode(model.state(), provenance))


def load_checkpoint(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    return decode(path.read_bytes())
