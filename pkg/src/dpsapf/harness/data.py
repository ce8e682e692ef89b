"""Synthetic 8x8 pattern datasets with a public/sensitive domain shift."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..denoiser import Dataset

CLASS_NAMES = ("horizontal_stripes", "vertical_stripes", "checkerboard", "blob")


@dataclass(frozen=True)
class ToySpec:
    """Generator settings.

    The public and sensitive splits share everything except ``phase_shift``
    (added to the stripe/checker phase and the blob centre) and
    ``contrast_scale`` (multiplies the pattern amplitude).
    """

    side: int = 8
    n_classes: int = 4
    pixel_noise: float = 0.1
    amplitude_jitter: float = 0.1
    period: float = 4.0
    phase_shift: float = 1.0
    contrast_scale: float = 0.8
    n_public: int = 2000
    n_sensitive: int = 2000
    n_test: int = 400

    def __post_init__(self):
        if self.n_classes != len(CLASS_NAMES):
            raise ValueError(f"exactly {len(CLASS_NAMES)} pattern classes are defined")
        if min(self.n_public, self.n_sensitive, self.n_test) < self.n_classes:
            raise ValueError("every split needs at least one sample per class")

    def to_dict(self) -> dict:
        return asdict(self)


def template(label: int, side: int = 8, period: float = 4.0, phase: float = 0.0, contrast: float = 1.0) -> np.ndarray:
    """Noise-free pattern for ``label`` as a flat row-major vector."""
    i, j = np.meshgrid(np.arange(side, dtype=float), np.arange(side, dtype=float), indexing="ij")
    w = 2 * np.pi / period
    if label == 0:
        img = np.cos(w * (i + phase))
    elif label == 1:
        img = np.cos(w * (j + phase))
    elif label == 2:
        # Half-pixel offset keeps the product away from zero on the grid.
        img = np.sign(np.cos(w * (i + 0.5 + phase)) * np.cos(w * (j + 0.5 + phase)) + 1e-12)
    elif label == 3:
        c = (side - 1) / 2 + phase
        r2 = (i - c) ** 2 + (j - c) ** 2
        img = 2.0 * np.exp(-r2 / (2 * (side / 5) ** 2)) - 1.0
    else:
        raise ValueError(f"unknown class {label}")
    return (contrast * img).reshape(-1)


def _balanced_labels(n: int, n_classes: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % n_classes
    return rng.permutation(labels)


def sample_split(spec: ToySpec, n: int, shifted: bool, rng: np.random.Generator) -> Dataset:
    phase = spec.phase_shift if shifted else 0.0
    contrast = spec.contrast_scale if shifted else 1.0
    temps = np.stack([template(c, spec.side, spec.period, phase, contrast) for c in range(spec.n_classes)])
    y = _balanced_labels(n, spec.n_classes, rng)
    amp = 1.0 + spec.amplitude_jitter * rng.standard_normal((n, 1))
    x = amp * temps[y] + spec.pixel_noise * rng.standard_normal((n, spec.side * spec.side))
    return Dataset(np.clip(x, -1.0, 1.0), y)


def gen_datasets(spec: ToySpec, rng: np.random.Generator) -> dict[str, Dataset]:
    """Public split, sensitive training split and sensitive test split."""
    return {
        "public": sample_split(spec, spec.n_public, False, rng),
        "sensitive_train": sample_split(spec, spec.n_sensitive, True, rng),
        "sensitive_test": sample_split(spec, spec.n_test, True, rng),
    }


def save_dataset(path, data: Dataset) -> None:
    np.savez(path, x=data.x, y=data.y)


def load_dataset(path) -> Dataset:
    with np.load(path) as f:
        return Dataset(f["x"], f["y"])
