"""Versioned binary checkpoints of named float arrays.

Layout: 8-byte magic, u32 format version, u32 array count, then per array a
u32 name length, the utf-8 name, u32 rank, u64 dims, and the little-endian
float32 payload.  Values are stored at 32-bit precision regardless of the
in-memory training precision.
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

from ..errors import ConfigError

MAGIC = b"AVSEPCKP"
VERSION = 1


def save_checkpoint(path, arrays: dict) -> None:
    payload = bytearray()
    payload += MAGIC
    payload += struct.pack("<II", VERSION, len(arrays))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        encoded = name.encode("utf-8")
        payload += struct.pack("<I", len(encoded))
        payload += encoded
        payload += struct.pack("<I", arr.ndim)
        payload += struct.pack(f"<{arr.ndim}Q", *arr.shape)
        payload += arr.astype("<f4").tobytes()
    # atomic write: temp file then rename
    directory = os.path.dirname(os.fspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".ckpt.tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", fh.read(8))
        if version != VERSION:
            raise ConfigError(f"{path}: unsupported checkpoint version {version}")
        arrays = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}Q", fh.read(8 * rank))
            n = int(np.prod(dims)) if dims else 1
            data = np.frombuffer(fh.read(4 * n), dtype="<f4")
            arrays[name] = data.reshape(dims).astype(np.float64)
    return arrays
