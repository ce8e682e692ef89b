"""Differentially private saliency-aware selection of parameter matrices.

Per-sample gradients over the candidate pool are clipped jointly, averaged
with the fixed normaliser ``n_star``, privatised with one Gaussian query of
std ``sigma_s * clip_s / n_star`` per coordinate, and ranked by norm.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .denoiser import Dataset, DenoiserParams, DiffusionSchedule, MatrixId, per_sample_grads


class SelectionError(ValueError):
    pass


def n_selected(ratio: float, k: int) -> int:
    """``max(1, round(ratio * k))`` with halves rounded away from zero."""
    if not 0 < ratio <= 1:
        raise SelectionError(f"selection ratio must be in (0, 1], got {ratio}")
    return min(k, max(1, math.floor(ratio * k + 0.5)))


def joint_clip(g: np.ndarray, clip: float) -> np.ndarray:
    """Scale ``g`` so its L2 norm is at most ``clip``; works row-wise on 2-D input."""
    g = np.asarray(g, dtype=np.float64)
    norms = np.linalg.norm(g, axis=-1, keepdims=True)
    return g / np.maximum(1.0, norms / clip)


@dataclass
class SaliencyReport:
    method: str
    pool: list[MatrixId]
    selected: list[MatrixId]
    ranking: list[MatrixId] = field(default_factory=list)
    s_k: dict[MatrixId, np.ndarray] = field(default_factory=dict, repr=False)
    g_tilde: dict[MatrixId, np.ndarray] = field(default_factory=dict, repr=False)
    norms: dict[MatrixId, float] = field(default_factory=dict)
    ratio_table: dict[MatrixId, float] = field(default_factory=dict)
    sigma_s: float = 0.0
    clip_s: float = 0.0
    n_star: int = 0
    ratio: float = 1.0
    consumes_budget: bool = False

    @property
    def noise_std(self) -> float:
        return self.sigma_s * self.clip_s / self.n_star if self.n_star else 0.0

    @property
    def test_mode(self) -> bool:
        """Noise-free selection; the clean averages may be reported."""
        return self.consumes_budget and self.sigma_s == 0.0

    def clean_norms(self) -> dict[MatrixId, float]:
        return {mid: float(np.linalg.norm(s)) for mid, s in self.s_k.items()}

    def to_dict(self) -> dict:
        out = {
            "method": self.method,
            "ratio": self.ratio,
            "sigma_s": self.sigma_s,
            "clip_s": self.clip_s,
            "n_star": self.n_star,
            "noise_std": self.noise_std,
            "consumes_budget": self.consumes_budget,
            "pool": [str(m) for m in self.pool],
            "selected": [str(m) for m in self.selected],
            "ranking": [str(m) for m in self.ranking],
            "norm_noisy": {str(m): v for m, v in self.norms.items()},
            "ratio_table": {str(m): v for m, v in self.ratio_table.items()},
            "g_tilde": {str(m): v.tolist() for m, v in self.g_tilde.items()},
        }
        if self.test_mode:
            out["norm_clean"] = {str(m): v for m, v in self.clean_norms().items()}
            out["s_k"] = {str(m): v.tolist() for m, v in self.s_k.items()}
        return out

    def heatmap_csv(self) -> str:
        """One row per pool matrix; ``norm_clean`` only in noise-free test mode."""
        cols = ["matrix"] + (["norm_clean"] if self.test_mode else []) + ["norm_noisy", "ratio", "selected"]
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(cols)
        clean = self.clean_norms() if self.test_mode else {}
        chosen = set(self.selected)
        for mid in self.pool:
            row = [str(mid)]
            if self.test_mode:
                row.append(repr(clean[mid]))
            row += [
                repr(self.norms.get(mid, float("nan"))),
                repr(self.ratio_table.get(mid, float("nan"))),
                int(mid in chosen),
            ]
            writer.writerow(row)
        return buf.getvalue()


def clipped_gradient_sum(
    data: Dataset,
    params: DenoiserParams,
    schedule: DiffusionSchedule,
    pool: list[MatrixId],
    clip_s: float,
    rng: np.random.Generator | None = None,
    chunk: int = 256,
    t: np.ndarray | None = None,
    noise: np.ndarray | None = None,
) -> tuple[dict[MatrixId, np.ndarray], np.ndarray]:
    """Sum over samples of jointly clipped per-sample gradients.

    Each sample gets one uniform timestep and one noise draw, taken from
    ``rng`` unless ``t`` and ``noise`` are given. Returns the per-matrix
    sums and the pre-clip joint norm of every sample.
    """
    n = len(data)
    t_all = rng.integers(1, schedule.T + 1, size=n) if t is None else np.asarray(t)
    noise_all = rng.standard_normal(data.x.shape) if noise is None else np.asarray(noise)
    sums = {mid: np.zeros(params[mid].shape) for mid in pool}
    pre_norms = np.empty(n)
    for start in range(0, n, chunk):
        sl = slice(start, min(start + chunk, n))
        _, grads = per_sample_grads(
            params, data.x[sl], t_all[sl], noise_all[sl], data.y[sl], schedule, track=pool
        )
        flat = np.concatenate([grads[mid].reshape(grads[mid].shape[0], -1) for mid in pool], axis=1)
        norms = np.linalg.norm(flat, axis=1)
        pre_norms[sl] = norms
        factor = 1.0 / np.maximum(1.0, norms / clip_s)
        # Samples are summed in dataset order.
        for mid in pool:
            sums[mid] += np.einsum("s,sij->ij", factor, grads[mid])
    return sums, pre_norms


def privatize(sums, n_star: int, sigma_s: float, clip_s: float, rng: np.random.Generator):
    """Averages ``sums / n_star`` and their noisy copies; noise is drawn in canonical order."""
    std = sigma_s * clip_s / n_star
    s_k, g_tilde = {}, {}
    for mid in sorted(sums):
        s_k[mid] = sums[mid] / n_star
        noise = rng.standard_normal(s_k[mid].shape) * std if std > 0 else 0.0
        g_tilde[mid] = s_k[mid] + noise
    return s_k, g_tilde, std


def rank_by_norm(norms: dict[MatrixId, float]) -> list[MatrixId]:
    """Descending norm; equal norms fall back to canonical order."""
    return sorted(norms, key=lambda m: (-norms[m], m.sort_key()))


def _check_inputs(data, pool, sigma_s, clip_s):
    if len(data) == 0:
        raise SelectionError("empty sensitive dataset")
    if not pool:
        raise SelectionError("empty candidate pool")
    if sigma_s < 0 or clip_s <= 0:
        raise SelectionError("need sigma_s >= 0 and clip_s > 0")


def _ratio_table(g_tilde, std):
    table = {}
    for mid, g in g_tilde.items():
        norm = float(np.linalg.norm(g))
        table[mid] = std * math.sqrt(g.size) / norm if norm > 0 else math.inf
    return table


def select(
    data: Dataset,
    params: DenoiserParams,
    schedule: DiffusionSchedule,
    pool: list[MatrixId],
    *,
    sigma_s: float,
    clip_s: float,
    ratio: float,
    rng: np.random.Generator,
    n_star: int | None = None,
    chunk: int = 256,
) -> SaliencyReport:
    """Rank pool matrices by noisy averaged clipped gradient norm; keep the top ``ratio``.

    ``sigma_s = 0`` is a noise-free test mode and gives no privacy.
    """
    _check_inputs(data, pool, sigma_s, clip_s)
    pool = sorted(pool)
    n_star = len(data) if n_star is None else n_star
    sums, _ = clipped_gradient_sum(data, params, schedule, pool, clip_s, rng, chunk)
    s_k, g_tilde, std = privatize(sums, n_star, sigma_s, clip_s, rng)
    norms = {mid: float(np.linalg.norm(g_tilde[mid])) for mid in pool}
    ranking = rank_by_norm(norms)
    h = n_selected(ratio, len(pool))
    return SaliencyReport(
        method="saliency",
        pool=pool,
        selected=sorted(ranking[:h]),
        ranking=ranking,
        s_k=s_k,
        g_tilde=g_tilde,
        norms=norms,
        ratio_table=_ratio_table(g_tilde, std),
        sigma_s=sigma_s,
        clip_s=clip_s,
        n_star=n_star,
        ratio=ratio,
        consumes_budget=True,
    )


def group_layers(pool: list[MatrixId]) -> dict[tuple, list[MatrixId]]:
    """Pool matrices grouped by attention layer, both in canonical order."""
    layers: dict[tuple, list[MatrixId]] = {}
    for mid in sorted(pool):
        layers.setdefault(mid.layer, []).append(mid)
    return layers


def select_layer_level(
    data: Dataset,
    params: DenoiserParams,
    schedule: DiffusionSchedule,
    pool: list[MatrixId],
    *,
    sigma_s: float,
    clip_s: float,
    ratio: float,
    rng: np.random.Generator,
    n_star: int | None = None,
    chunk: int = 256,
) -> SaliencyReport:
    """Like ``select`` but ranks whole layers by their concatenated noisy gradient."""
    _check_inputs(data, pool, sigma_s, clip_s)
    pool = sorted(pool)
    n_star = len(data) if n_star is None else n_star
    sums, _ = clipped_gradient_sum(data, params, schedule, pool, clip_s, rng, chunk)
    s_k, g_tilde, std = privatize(sums, n_star, sigma_s, clip_s, rng)
    norms = {mid: float(np.linalg.norm(g_tilde[mid])) for mid in pool}
    layers = group_layers(pool)
    layer_norm = {key: math.sqrt(sum(norms[m] ** 2 for m in mids)) for key, mids in layers.items()}
    order = sorted(layers, key=lambda key: (-layer_norm[key], layers[key][0].sort_key()))
    h = n_selected(ratio, len(layers))
    chosen = [m for key in order[:h] for m in layers[key]]
    ranking = [m for key in order for m in layers[key]]
    return SaliencyReport(
        method="layer",
        pool=pool,
        selected=sorted(chosen),
        ranking=ranking,
        s_k=s_k,
        g_tilde=g_tilde,
        norms=norms,
        ratio_table=_ratio_table(g_tilde, std),
        sigma_s=sigma_s,
        clip_s=clip_s,
        n_star=n_star,
        ratio=ratio,
        consumes_budget=True,
    )


def select_random(pool: list[MatrixId], ratio: float, rng: np.random.Generator) -> SaliencyReport:
    """Uniform subset of the pool; data-independent, so it costs no budget."""
    if not pool:
        raise SelectionError("empty candidate pool")
    pool = sorted(pool)
    h = n_selected(ratio, len(pool))
    idx = rng.choice(len(pool), size=h, replace=False)
    return SaliencyReport(
        method="random",
        pool=pool,
        selected=sorted(pool[i] for i in idx),
        ratio=ratio,
    )


def select_all(pool: list[MatrixId], method: str = "all") -> SaliencyReport:
    pool = sorted(pool)
    return SaliencyReport(method=method, pool=pool, selected=list(pool), ratio=1.0)
