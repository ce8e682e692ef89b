"""Low-rank adapters ``W' = W + A B`` for selected parameter matrices."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .denoiser import DenoiserParams, MatrixId

A_INIT_STD = 0.02


@dataclass
class LoraAdapter:
    target: MatrixId
    A: np.ndarray  # rows x rank
    B: np.ndarray  # rank x cols

    def __post_init__(self):
        if self.A.shape[1] != self.B.shape[0]:
            raise ValueError(f"{self.target}: A is {self.A.shape}, B is {self.B.shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    @property
    def delta(self) -> np.ndarray:
        return self.A @ self.B

    @property
    def size(self) -> int:
        return self.A.size + self.B.size


@dataclass
class TrainableSet:
    """Adapters keyed by matrix id; flattening follows canonical id order, A before B."""

    adapters: dict[MatrixId, LoraAdapter] = field(default_factory=dict)

    def __post_init__(self):
        self.adapters = {mid: self.adapters[mid] for mid in sorted(self.adapters)}

    def __len__(self) -> int:
        return len(self.adapters)

    def __iter__(self):
        return iter(self.adapters)

    def __getitem__(self, mid: MatrixId) -> LoraAdapter:
        return self.adapters[mid]

    def get(self, mid, default=None):
        return self.adapters.get(mid, default)

    @property
    def n_params(self) -> int:
        return sum(a.size for a in self.adapters.values())

    def keys(self) -> list[tuple[MatrixId, str]]:
        """Gradient keys in flattening order."""
        return [(mid, part) for mid in self.adapters for part in ("A", "B")]

    def flatten(self) -> np.ndarray:
        return np.concatenate(
            [np.concatenate([a.A.ravel(), a.B.ravel()]) for a in self.adapters.values()]
        ) if self.adapters else np.zeros(0)

    def unflatten(self, flat: np.ndarray) -> "TrainableSet":
        out, pos = {}, 0
        for mid, a in self.adapters.items():
            na, nb = a.A.size, a.B.size
            A = flat[pos : pos + na].reshape(a.A.shape)
            B = flat[pos + na : pos + na + nb].reshape(a.B.shape)
            out[mid] = LoraAdapter(mid, A, B)
            pos += na + nb
        if pos != flat.size:
            raise ValueError(f"flat vector has {flat.size} entries, expected {pos}")
        return TrainableSet(out)

    def copy(self) -> "TrainableSet":
        return TrainableSet({m: LoraAdapter(m, a.A.copy(), a.B.copy()) for m, a in self.adapters.items()})


def attach(
    selected: Iterable[MatrixId],
    shapes: dict[MatrixId, tuple[int, int]],
    rank: int,
    rng: np.random.Generator,
    init_std: float = A_INIT_STD,
) -> TrainableSet:
    """Fresh adapters: Gaussian ``A``, zero ``B``, so the model is unchanged."""
    if rank < 1:
        raise ValueError("rank must be >= 1")
    adapters = {}
    for mid in sorted(selected):
        rows, cols = shapes[mid]
        if rank > min(rows, cols):
            raise ValueError(f"rank {rank} too large for {mid} with shape {rows}x{cols}")
        adapters[mid] = LoraAdapter(mid, rng.normal(0.0, init_std, size=(rows, rank)), np.zeros((rank, cols)))
    return TrainableSet(adapters)


def effective_weight(frozen: np.ndarray, adapter: LoraAdapter) -> np.ndarray:
    if frozen.shape != (adapter.A.shape[0], adapter.B.shape[1]):
        raise ValueError(f"{adapter.target}: weight {frozen.shape} vs adapter {adapter.A.shape}x{adapter.B.shape}")
    return frozen + adapter.A @ adapter.B


def merge(frozen: DenoiserParams, trainable: TrainableSet) -> DenoiserParams:
    """Materialise ``W + A B`` for adapted matrices; the rest are shared untouched."""
    return frozen.replace({mid: effective_weight(frozen[mid], a) for mid, a in trainable.adapters.items()})
