"""DP-SGD fine-tuning of low-rank adapters on the selected matrices.

One step Poisson-samples a batch, clips every per-sample gradient of the
trainable parameters jointly to ``clip``, divides the sum by the expected
batch size ``b_star`` (not the realised one), adds Gaussian noise of std
``clip * sigma_d / b_star`` and moves the parameters by ``-lr`` times the
result. An empty batch still gets noise and still counts as a step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import accountant as acc
from .denoiser import Dataset, DenoiserParams, DiffusionSchedule, MatrixId, per_sample_grads, train_step_batch
from .lora import TrainableSet, attach, merge
from .saliency import SaliencyReport, select, select_all, select_layer_level, select_random

MODES = ("saliency", "random", "layer", "all-attention", "all-parameter", "none")

# Fixed purpose codes for RNG substreams derived from one seed.
_STREAMS = {"selection": 1, "init": 2, "sampling": 3, "noise": 4, "diffusion": 5, "eval": 6}


def substream(seed: int, purpose: str) -> np.random.Generator:
    return np.random.default_rng([seed, _STREAMS[purpose]])


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    """Fine-tuning hyperparameters.

    ``q`` defaults to ``b_star / N``; giving ``q`` instead fixes
    ``b_star = q N``. ``sigma_d = None`` means calibrate to ``epsilon``.
    ``epsilon = inf`` is the non-private baseline: no clipping, no noise.
    """

    b_star: float = 64.0
    q: float | None = None
    t_d: int = 1000
    sigma_d: float | None = None
    clip: float = 1.0
    lr: float = 5e-4
    rank: int = 4
    ratio: float = 0.3
    epsilon: float = 10.0
    delta: float | None = None
    sigma_s: float = 5.0
    clip_s: float = 1.0
    mode: str = "saliency"
    seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.q is not None and not 0 < self.q <= 1:
            raise ValueError("q must be in (0, 1]")
        if self.b_star <= 0 or self.t_d < 1 or self.clip <= 0 or self.lr <= 0:
            raise ValueError("need b_star > 0, t_d >= 1, clip > 0, lr > 0")
        if self.sigma_d is not None and self.sigma_d < 0:
            raise ValueError("sigma_d must be >= 0")
        if not 0 < self.ratio <= 1:
            raise ValueError("ratio must be in (0, 1]")

    @property
    def private(self) -> bool:
        return math.isfinite(self.epsilon)

    def resolve(self, n: int) -> "TrainConfig":
        """Fill in ``q``/``b_star`` consistently for a dataset of size ``n``."""
        if self.q is None:
            q = self.b_star / n
            if not 0 < q <= 1:
                raise ValueError(f"b_star={self.b_star} is not a valid expected batch for N={n}")
            return replace(self, q=q)
        return replace(self, b_star=self.q * n)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("epsilon") in ("inf", "Infinity"):
            d["epsilon"] = math.inf
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})

    def to_dict(self) -> dict:
        d = asdict(self)
        if math.isinf(self.epsilon):
            d["epsilon"] = "inf"
        return d


@dataclass(frozen=True)
class StepRecord:
    h: int
    batch_size: int
    loss_mean: float
    grad_norm_mean: float
    grad_norm_max: float
    clipped_frac: float

    def row(self) -> list:
        return [self.h, self.batch_size, repr(self.loss_mean), repr(self.grad_norm_mean),
                repr(self.grad_norm_max), repr(self.clipped_frac)]


STEP_COLUMNS = ["h", "batch_size", "loss_mean", "grad_norm_mean", "grad_norm_max", "clipped_frac"]


def poisson_sample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
    """Indices kept independently with probability ``q``; may be empty."""
    if not 0 < q <= 1:
        raise ValueError("q must be in (0, 1]")
    if q == 1:
        return np.arange(n)
    return np.flatnonzero(rng.random(n) < q)


def _flat_grads(params, trainable, batch, schedule, diff_rng):
    """Per-sample losses and flattened gradients of the trainable parameters."""
    t, noise = train_step_batch(diff_rng, batch.x, schedule.T)
    if isinstance(trainable, TrainableSet):
        losses, grads = per_sample_grads(
            params, batch.x, t, noise, batch.y, schedule, adapters=trainable, track_adapters=True
        )
        keys = trainable.keys()
    else:
        keys = list(trainable)
        losses, grads = per_sample_grads(params, batch.x, t, noise, batch.y, schedule, track=keys)
    flat = np.concatenate([grads[k].reshape(len(batch), -1) for k in keys], axis=1)
    if not np.all(np.isfinite(flat)):
        bad = [str(k) for k in keys if not np.all(np.isfinite(grads[k]))]
        raise TrainingError(f"non-finite per-sample gradient in {bad}")
    return losses, flat


def _n_trainable(params, trainable) -> int:
    if isinstance(trainable, TrainableSet):
        return trainable.n_params
    return sum(params[mid].size for mid in trainable)


def _apply(params, trainable, update):
    if isinstance(trainable, TrainableSet):
        return params, trainable.unflatten(trainable.flatten() + update)
    new, pos = {}, 0
    for mid in trainable:
        w = params[mid]
        new[mid] = w + update[pos : pos + w.size].reshape(w.shape)
        pos += w.size
    return params.replace(new), trainable


def dp_step(
    params: DenoiserParams,
    trainable,
    batch: Dataset,
    config: TrainConfig,
    schedule: DiffusionSchedule,
    rng: np.random.Generator,
    diff_rng: np.random.Generator,
    sigma_d: float,
    h: int = 0,
):
    """One privatised SGD step.

    ``trainable`` is a ``TrainableSet`` (adapters move) or a sequence of
    ``MatrixId`` (those weights move directly). Returns the updated
    ``(params, trainable, StepRecord)``. ``config.b_star`` must be resolved.
    """
    dim = _n_trainable(params, trainable)
    b = len(batch)
    if b:
        losses, flat = _flat_grads(params, trainable, batch, schedule, diff_rng)
        norms = np.linalg.norm(flat, axis=1)
        if config.private:
            factor = 1.0 / np.maximum(1.0, norms / config.clip)
            flat = flat * factor[:, None]
            clipped = float(np.mean(norms > config.clip))
        else:
            clipped = 0.0
        total = flat.sum(axis=0)
        record = StepRecord(h, b, float(losses.mean()), float(norms.mean()), float(norms.max()), clipped)
    else:
        total = np.zeros(dim)
        record = StepRecord(h, 0, math.nan, math.nan, math.nan, 0.0)
    g = total / config.b_star
    if sigma_d > 0:
        g = g + rng.standard_normal(dim) * (config.clip * sigma_d / config.b_star)
    params, trainable = _apply(params, trainable, -config.lr * g)
    return params, trainable, record


@dataclass
class TrainResult:
    params: DenoiserParams
    trainable: TrainableSet
    saliency: SaliencyReport
    certificate: dict
    steps: list[StepRecord] = field(default_factory=list)
    config: TrainConfig | None = None

    @property
    def final_loss(self) -> float:
        tail = [s.loss_mean for s in self.steps[-50:] if s.batch_size]
        return float(np.mean(tail)) if tail else math.nan

    def report(self) -> dict:
        return {
            "config": self.config.to_dict() if self.config else None,
            "certificate": self.certificate,
            "selection": self.saliency.to_dict(),
            "n_trainable": self.trainable.n_params if len(self.trainable) else None,
            "final_loss": self.final_loss,
        }


def pool_for(mode: str, params: DenoiserParams) -> list[MatrixId]:
    cfg = params.config
    return cfg.all_ids() if mode == "all-parameter" else cfg.attention_ids()


def run_selection(params, data, config: TrainConfig, schedule, rng) -> SaliencyReport:
    pool = pool_for(config.mode, params)
    sigma_s = config.sigma_s if config.private else 0.0
    kw = dict(sigma_s=sigma_s, clip_s=config.clip_s, ratio=config.ratio, rng=rng)
    if config.mode in ("saliency", "all-parameter", "none"):
        return select(data, params, schedule, pool, **kw)
    if config.mode == "layer":
        return select_layer_level(data, params, schedule, pool, **kw)
    if config.mode == "random":
        return select_random(pool, config.ratio, rng)
    return select_all(pool, "all-attention")


def privacy_certificate(config: TrainConfig, selection_sigma: float, sigma_d: float, n: int) -> dict:
    """Accountant report for a resolved config; ``selection_sigma = inf`` when selection is free."""
    base = {"sigma_d": sigma_d, "sigma_s": selection_sigma, "q": config.q, "t_d": config.t_d}
    if not config.private:
        return {**base, "private": False, "epsilon": "inf", "sigma_s": 0.0}
    delta = config.delta if config.delta is not None else acc.default_delta(n)
    cert = acc.certificate(q=config.q, sigma_d=sigma_d, t_d=config.t_d, sigma_s=selection_sigma, delta=delta)
    if math.isinf(selection_sigma):
        base["sigma_s"] = None
    return {**base, **cert, "private": True}


def calibrated_sigma_d(config: TrainConfig, n: int, selection_costs: bool) -> float:
    if not config.private:
        return 0.0
    if config.sigma_d is not None:
        return config.sigma_d
    delta = config.delta if config.delta is not None else acc.default_delta(n)
    sel = config.sigma_s if selection_costs else math.inf
    return acc.calibrate_sigma_d(acc.PrivacySpec(config.epsilon, delta), sel, config.q, config.t_d)


def train(
    public: DenoiserParams,
    data: Dataset,
    config: TrainConfig,
    schedule: DiffusionSchedule,
    transform=None,
) -> TrainResult:
    """Select, attach adapters, run ``t_d`` DP steps and merge.

    ``transform(params, report, rng)`` may rewrite the frozen weights after
    selection; the harness uses it for the noisy-replacement variant.
    """
    if len(data) == 0:
        raise ValueError("empty sensitive dataset")
    config = config.resolve(len(data))
    selection_costs = config.mode not in ("random", "all-attention")
    # Calibrate first so an infeasible target fails before any compute.
    sigma_d = calibrated_sigma_d(config, len(data), selection_costs)
    report = run_selection(public, data, config, schedule, substream(config.seed, "selection"))
    init_rng = substream(config.seed, "init")
    frozen = transform(public, report, init_rng) if transform else public
    if config.mode == "none":
        trainable = tuple(report.selected)
    else:
        trainable = attach(report.selected, frozen.shapes(), config.rank, init_rng)

    sampling = substream(config.seed, "sampling")
    noise = substream(config.seed, "noise")
    diffusion = substream(config.seed, "diffusion")
    params, steps = frozen, []
    for h in range(config.t_d):
        idx = poisson_sample(len(data), config.q, sampling)
        params, trainable, rec = dp_step(
            params, trainable, data.subset(idx), config, schedule, noise, diffusion, sigma_d, h
        )
        steps.append(rec)

    sel_sigma = config.sigma_s if selection_costs else math.inf
    cert = privacy_certificate(config, sel_sigma, sigma_d, len(data))
    if isinstance(trainable, TrainableSet):
        merged = merge(frozen, trainable)
    else:
        merged, trainable = params, TrainableSet()
    return TrainResult(merged, trainable, report, cert, steps, config)
