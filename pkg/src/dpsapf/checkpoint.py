"""Flat little-endian binary checkpoints for denoiser weights and adapters.

Layout::

    b"DSPF"  u32 version  u32 L  u32 m  u32 e  u32 K_cls  u32 T
    f64 matrices, canonical MatrixId order, row-major
    u32 n_adapters
    per adapter: u32 len, utf-8 id, u32 r, f64 A (rows x r), f64 B (r x cols)

The fixed projections are a function of the dimensions, so the header is
enough to rebuild the model.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .denoiser import DenoiserConfig, DenoiserParams, MatrixId
from .lora import LoraAdapter, TrainableSet

MAGIC = b"DSPF"
VERSION = 1
_HEADER = struct.Struct("<4s6I")
_U32 = struct.Struct("<I")


class CheckpointError(ValueError):
    pass


def to_bytes(params: DenoiserParams, adapters: TrainableSet | None = None) -> bytes:
    cfg = params.config
    parts = [_HEADER.pack(MAGIC, VERSION, cfg.n_blocks, cfg.d_model, cfg.d_embed, cfg.n_classes, cfg.n_steps)]
    for mid in cfg.all_ids():
        parts.append(np.ascontiguousarray(params[mid], dtype="<f8").tobytes())
    adapters = adapters or TrainableSet()
    parts.append(_U32.pack(len(adapters)))
    for mid in adapters:
        a = adapters[mid]
        name = str(mid).encode()
        parts += [_U32.pack(len(name)), name, _U32.pack(a.rank)]
        parts.append(np.ascontiguousarray(a.A, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(a.B, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError("truncated checkpoint")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def matrix(self, rows: int, cols: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * rows * cols), dtype="<f8").reshape(rows, cols).astype(np.float64)


def from_bytes(buf: bytes) -> tuple[DenoiserParams, TrainableSet]:
    r = _Reader(buf)
    magic, version, L, m, e, k_cls, T = _HEADER.unpack(r.take(_HEADER.size))
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version}")
    cfg = DenoiserConfig(n_blocks=L, d_model=m, d_embed=e, n_classes=k_cls, n_steps=T)
    weights = {mid: r.matrix(*cfg.shape(mid)) for mid in cfg.all_ids()}
    adapters = {}
    for _ in range(r.u32()):
        mid = MatrixId.parse(r.take(r.u32()).decode())
        rank = r.u32()
        rows, cols = cfg.shape(mid)
        adapters[mid] = LoraAdapter(mid, r.matrix(rows, rank), r.matrix(rank, cols))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes")
    return DenoiserParams(cfg, weights), TrainableSet(adapters)


def save(path, params: DenoiserParams, adapters: TrainableSet | None = None) -> None:
    Path(path).write_bytes(to_bytes(params, adapters))


def load(path) -> tuple[DenoiserParams, TrainableSet]:
    return from_bytes(Path(path).read_bytes())
