"""Versioned binary checkpoints.

Layout (all integers unsigned 64-bit little-endian unless noted):

  magic   4 bytes  b"DIFM"
  version u32      currently 1
  config  u64 byte length + UTF-8 key = value text
  count   u64      number of tensors
  tensor  u64 name length + UTF-8 name
          u64 rank, then rank extents
          float32 little-endian values, row-major

Tensors are written in lexicographic name order and round-trip bitwise.
"""

from __future__ import annotations

import struct

import numpy as np

from .autodiff import Tensor
from .config import Config, parse_config_text, render_config

MAGIC = b"DIFM"
VERSION = 1


def save_checkpoint(params: dict[str, Tensor], cfg: Config, path) -> None:
    blob = render_config(cfg).encode("utf-8")
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(blob)))
        f.write(blob)
        names = sorted(params)
        f.write(struct.pack("<Q", len(names)))
        for name in names:
            data = np.ascontiguousarray(params[name].data, dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<Q", len(nb)))
            f.write(nb)
            f.write(struct.pack("<Q", data.ndim))
            f.write(struct.pack(f"<{data.ndim}Q", *data.shape))
            f.write(data.tobytes())


class CorruptCheckpoint(ValueError):
    pass


def _read(f, n: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise CorruptCheckpoint(f"corrupt checkpoint: truncated while reading {what}")
    return buf


def load_checkpoint(path) -> tuple[dict[str, Tensor], Config]:
    with open(path, "rb") as f:
        if _read(f, 4, "magic") != MAGIC:
            raise CorruptCheckpoint("corrupt checkpoint: bad magic")
        (version,) = struct.unpack("<I", _read(f, 4, "version"))
        if version != VERSION:
            raise CorruptCheckpoint(f"unsupported version {version} (expected {VERSION})")
        (cfg_len,) = struct.unpack("<Q", _read(f, 8, "config length"))
        cfg = parse_config_text(_read(f, cfg_len, "config").decode("utf-8"))
        (count,) = struct.unpack("<Q", _read(f, 8, "tensor count"))
        params: dict[str, Tensor] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<Q", _read(f, 8, "name length"))
            name = _read(f, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<Q", _read(f, 8, "rank"))
            shape = struct.unpack(f"<{rank}Q", _read(f, 8 * rank, "extents"))
            n_vals = int(np.prod(shape)) if rank else 1
            raw = _read(f, 4 * n_vals, f"values of '{name}'")
            data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
            params[name] = Tensor(data.copy(), requires_grad=True)
        if f.read(1):
            raise CorruptCheckpoint("corrupt checkpoint: trailing bytes")
    return params, cfg
