"""Binary checkpoint container.

Layout (little-endian)::

    b"MPCK" | u32 version | u32 n_cfg | cfg utf-8 bytes
    u32 n_tensors | n_tensors * (u32 n_name | name utf-8)
    n_tensors * (u32 ndim | ndim * u32 dims | f32 data)
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"MPCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(state: dict[str, np.ndarray], config_text: str) -> bytes:
    names = list(state)
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    cfg = config_text.encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(cfg)), cfg, struct.pack("<I", len(names))]
    for n in names:
        b = n.encode("utf-8")
        parts += [struct.pack("<I", len(b)), b]
    for n in names:
        arr = np.asarray(state[n])
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw, self.pos = raw, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint reading {what} at byte {self.pos}")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(raw: bytes) -> tuple[str, dict[str, np.ndarray]]:
    r = _Reader(raw)
    magic = r.take(4, "magic")
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version = r.u32("version")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    cfg = r.take(r.u32("config length"), "config").decode("utf-8")
    count = r.u32("tensor count")
    names = [r.take(r.u32("name length"), "name").decode("utf-8") for _ in range(count)]
    if len(set(names)) != len(names):
        raise CheckpointError("duplicate tensor names")
    state = {}
    for n in names:
        ndim = r.u32(f"{n} ndim")
        shape = tuple(struct.unpack(f"<{ndim}I", r.take(4 * ndim, f"{n} shape")))
        size = int(np.prod(shape)) if ndim else 1
        state[n] = np.frombuffer(r.take(4 * size, f"{n} data"), dtype="<f4").reshape(shape).copy()
    if r.pos != len(raw):
        raise CheckpointError(f"{len(raw) - r.pos} trailing bytes after tensor data")
    return cfg, state


def save_checkpoint(model, path, config_text: str) -> None:
    Path(path).write_bytes(encode_checkpoint(model.state_dict(), config_text))


def read_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    try:
        return decode_checkpoint(Path(path).read_bytes())
    except CheckpointError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
