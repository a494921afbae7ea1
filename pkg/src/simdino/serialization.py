"""Binary checkpoint and feature-dump formats.

All integers and floats are little-endian.

Checkpoint::

    b"SIMDINO\\0"               8-byte magic
    u32 version
    64 ascii bytes              sha256 hex digest of the run config
    u64 length + utf-8 JSON     metadata (step, rng state, ...)
    u32 block count
    per block: u16 name length, utf-8 name, u8 ndim, ndim × u64 extents,
               float64 payload in row-major order

Feature dump::

    b"SDFEAT\\0\\0", u32 version, u64 d, u64 M, u64 class count,
    d×M float64 features (row-major), M int64 labels
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"SIMDINO\0"
FEAT_MAGIC = b"SDFEAT\0\0"
VERSION = 1


class FormatError(ValueError):
    pass


def write_checkpoint(path, blocks: dict[str, np.ndarray], meta: dict, config_hash: str) -> None:
    if len(config_hash) != 64:
        raise ValueError("config hash must be a 64-character hex digest")
    meta_bytes = json.dumps(meta, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", VERSION), config_hash.encode("ascii"),
             struct.pack("<Q", len(meta_bytes)), meta_bytes, struct.pack("<I", len(blocks))]
    for name, arr in blocks.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)))
        parts.append(nb)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    try:
        tmp.write_bytes(b"".join(parts))
        tmp.replace(path)
    except OSError as exc:
        raise OSError(f"cannot write checkpoint {path}: {exc}") from exc


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated file")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))


def read_checkpoint(path) -> tuple[dict[str, np.ndarray], dict, str]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(8) != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    config_hash = r.take(64).decode("ascii")
    (meta_len,) = r.unpack("<Q")
    meta = json.loads(r.take(meta_len).decode())
    (count,) = r.unpack("<I")
    blocks = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        name = r.take(nlen).decode()
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}Q") if ndim else ()
        n = int(np.prod(shape)) if ndim else 1
        blocks[name] = np.frombuffer(r.take(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(r.raw):
        raise FormatError(f"{path}: trailing bytes after last block")
    return blocks, meta, config_hash


def write_features(path, features: np.ndarray, labels: np.ndarray, n_classes: int) -> None:
    F = np.ascontiguousarray(features, dtype="<f8")
    y = np.ascontiguousarray(labels, dtype="<i8")
    d, M = F.shape
    if y.shape != (M,):
        raise ValueError(f"{M} feature columns but {y.shape[0]} labels")
    Path(path).write_bytes(FEAT_MAGIC + struct.pack("<IQQQ", VERSION, d, M, n_classes)
                           + F.tobytes() + y.tobytes())


def read_features(path) -> tuple[np.ndarray, np.ndarray, int]:
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(8) != FEAT_MAGIC:
        raise FormatError(f"{path}: not a feature dump (bad magic)")
    version, d, M, k = r.unpack("<IQQQ")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported feature dump version {version}")
    F = np.frombuffer(r.take(8 * d * M), dtype="<f8").reshape(d, M).astype(np.float64)
    y = np.frombuffer(r.take(8 * M), dtype="<i8").astype(np.int64)
    return F, y, int(k)
