"""Public-model pretraining, fine-tuning variants, sweeps and their CSV/JSON output."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .. import accountant as acc
from .. import checkpoint
from ..denoiser import (
    Dataset,
    DenoiserConfig,
    DenoiserParams,
    init_params,
    loss,
    make_schedule,
    per_sample_grads,
    sample_batch,
    train_step_batch,
)
from ..lora import A_INIT_STD
from ..trainer import STEP_COLUMNS, TrainConfig, TrainResult, substream, train
from .data import ToySpec, gen_datasets
from .metrics import LogisticClassifier, MetricsReport, evaluate

VARIANTS = {
    "dp-sapf": {"mode": "saliency"},
    "random": {"mode": "random"},
    "noisy": {"mode": "saliency"},
    "wo-lora": {"mode": "none"},
    "layer-level": {"mode": "layer"},
    "all-parameter": {"mode": "all-parameter"},
    "all-attention": {"mode": "all-attention"},
    "non-private": {"mode": "saliency", "epsilon": math.inf},
}

SWEEP_DEFAULTS = {
    "epsilon": [0.2, 1.0, 5.0, 10.0, 15.0, 20.0],
    "ratio_c": [0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
    "sigma_s": [5.0, 10.0, 20.0, 25.0],
}

# Reference allocation for the epsilon sweep: the selection share at (eps, sigma_s) = (5, 10).
_REF_EPS, _REF_SIGMA_S = 5.0, 10.0


# Harness step size: the largest of 0.05/0.1/0.2/0.5/1/2 with at least a 4x
# margin below divergence of the non-private run; 5e-4 leaves the adapters still.
HARNESS_LR = 0.5


class HarnessError(RuntimeError):
    pass


@dataclass(frozen=True)
class HarnessConfig:
    """Everything a pipeline run depends on besides the seed.

    The diffusion schedule is steeper than the textbook 1e-4..0.02 so that
    50 steps actually reach noise on 8x8 images.
    """

    toy: ToySpec = field(default_factory=ToySpec)
    model: DenoiserConfig = field(default_factory=DenoiserConfig)
    beta_start: float = 0.002
    beta_end: float = 0.4
    pretrain_steps: int = 5000
    pretrain_lr: float = 0.003
    pretrain_batch: int = 64
    pretrain_optimizer: str = "adam"
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr=HARNESS_LR))
    synth_per_test: int = 4
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)

    def schedule(self):
        return make_schedule(self.model.n_steps, self.beta_start, self.beta_end)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "HarnessConfig":
        d = dict(d)
        kw = {}
        if "toy" in d:
            kw["toy"] = ToySpec(**d.pop("toy"))
        if "model" in d:
            kw["model"] = DenoiserConfig(**d.pop("model"))
        if "train" in d:
            kw["train"] = TrainConfig.from_dict({**TrainConfig(lr=HARNESS_LR).to_dict(), **d.pop("train")})
        if "seeds" in d:
            kw["seeds"] = tuple(d.pop("seeds"))
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise HarnessError(f"unknown config keys {sorted(unknown)}")
        return cls(**kw, **d)

    @classmethod
    def load(cls, path) -> "HarnessConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# -- serialisation helpers ----------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    return obj


def dumps(obj) -> str:
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj))


def _cell(v):
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return ""
    return v


def to_csv(rows: list[dict], columns: list[str] | None = None) -> str:
    columns = columns or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r.get(c)) for c in columns])
    return buf.getvalue()


def steps_csv(result: TrainResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(STEP_COLUMNS)
    for s in result.steps:
        w.writerow(s.row())
    return buf.getvalue()


# -- pretraining --------------------------------------------------------------


def eval_loss(params: DenoiserParams, data: Dataset, schedule, rng: np.random.Generator) -> float:
    t, noise = train_step_batch(rng, data.x, schedule.T)
    return float(loss(params, data.x, t, noise, data.y, schedule).mean())


def pretrain_public(
    data: Dataset,
    config: DenoiserConfig,
    schedule,
    steps: int,
    rng: np.random.Generator,
    lr: float = 0.003,
    batch: int = 64,
    optimizer: str = "adam",
) -> tuple[DenoiserParams, list[float]]:
    """Non-private training of every matrix on the public split.

    ``optimizer`` is ``"adam"`` or ``"sgd"`` (plain, full-matrix). Returns
    the parameters and the per-step mean batch loss.
    """
    if steps < 1:
        raise ValueError("pretraining needs steps >= 1")
    if optimizer not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {optimizer!r}")
    params = init_params(config, rng)
    ids = config.all_ids()
    m1 = {k: np.zeros_like(params[k]) for k in ids}
    m2 = {k: np.zeros_like(params[k]) for k in ids}
    b1, b2 = 0.9, 0.999
    history = []
    for s in range(steps):
        idx = rng.integers(0, len(data), size=batch)
        t, noise = train_step_batch(rng, data.x[idx], schedule.T)
        losses, grads = per_sample_grads(params, data.x[idx], t, noise, data.y[idx], schedule, track=ids)
        if not np.all(np.isfinite(losses)):
            raise HarnessError(f"pretraining diverged at step {s}")
        history.append(float(losses.mean()))
        upd = {}
        for k in ids:
            g = grads[k].mean(axis=0)
            if optimizer == "sgd":
                upd[k] = params[k] - lr * g
                continue
            m1[k] = b1 * m1[k] + (1 - b1) * g
            m2[k] = b2 * m2[k] + (1 - b2) * g * g
            mhat = m1[k] / (1 - b1 ** (s + 1))
            vhat = m2[k] / (1 - b2 ** (s + 1))
            upd[k] = params[k] - lr * mhat / (np.sqrt(vhat) + 1e-8)
        params = params.replace(upd)
    return params, history


# -- variants -----------------------------------------------------------------


def noisy_transform(params: DenoiserParams, report, rng: np.random.Generator) -> DenoiserParams:
    """Replace every unselected pool matrix with N(0, 0.02^2) entries."""
    chosen = set(report.selected)
    return params.replace(
        {mid: rng.normal(0.0, A_INIT_STD, size=params[mid].shape) for mid in report.pool if mid not in chosen}
    )


def variant_config(variant: str, base: TrainConfig, seed: int) -> TrainConfig:
    if variant not in VARIANTS:
        raise HarnessError(f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}")
    return replace(base, seed=seed, **VARIANTS[variant])


@dataclass
class VariantRun:
    variant: str
    seed: int
    metrics: MetricsReport
    result: TrainResult
    synth_x: np.ndarray = field(repr=False)
    synth_y: np.ndarray = field(repr=False)

    def row(self) -> dict:
        cert = self.result.certificate
        return {
            "variant": self.variant,
            "seed": self.seed,
            "mode": self.result.config.mode,
            "target_epsilon": self.result.config.to_dict()["epsilon"],
            "epsilon": cert.get("epsilon"),
            "sigma_s": cert.get("sigma_s"),
            "sigma_d": cert.get("sigma_d"),
            "r_s": cert.get("r_s"),
            "ratio_c": self.result.config.ratio,
            "n_selected": len(self.result.saliency.selected),
            "final_loss": self.result.final_loss,
            "mmd": self.metrics.mmd,
            "class_mmd": self.metrics.class_mmd,
            "util_acc": self.metrics.util_acc,
        }


METRIC_COLUMNS = ["variant", "seed", "mode", "target_epsilon", "epsilon", "sigma_s", "sigma_d", "r_s", "ratio_c",
                  "n_selected", "final_loss", "mmd", "class_mmd", "util_acc"]


def synthesize(params: DenoiserParams, schedule, count: int, rng: np.random.Generator, chunk: int = 400):
    """Class-balanced synthetic set; labels cycle through the classes."""
    labels = np.arange(count) % params.config.n_classes
    xs = [sample_batch(params, schedule, labels[i : i + chunk], rng) for i in range(0, count, chunk)]
    return np.concatenate(xs), labels


def run_variant(
    variant: str,
    public: DenoiserParams,
    datasets: dict[str, Dataset],
    hcfg: HarnessConfig,
    seed: int,
    train_config: TrainConfig | None = None,
) -> VariantRun:
    """Fine-tune one variant on the sensitive split, sample and score."""
    schedule = hcfg.schedule()
    cfg = variant_config(variant, train_config or hcfg.train, seed)
    transform = noisy_transform if variant == "noisy" else None
    result = train(public, datasets["sensitive_train"], cfg, schedule, transform=transform)
    test = datasets["sensitive_test"]
    count = hcfg.synth_per_test * len(test)
    sx, sy = synthesize(result.params, schedule, count, substream(seed, "eval"))
    metrics = evaluate(sx, sy, test.x, test.y, public.config.n_classes)
    return VariantRun(variant, seed, metrics, result, sx, sy)


def real_data_accuracy(datasets: dict[str, Dataset], n_classes: int) -> float:
    """Utility ceiling: classifier trained on real sensitive data."""
    tr, te = datasets["sensitive_train"], datasets["sensitive_test"]
    return LogisticClassifier(n_classes).fit(tr.x, tr.y).accuracy(te.x, te.y)


# -- sweeps -------------------------------------------------------------------


def matched_sigma_s(epsilon: float, base: TrainConfig, n: int, lo: float = 0.5, hi: float = 500.0) -> float:
    """sigma_s giving the same selection share r_s as the (5, 10) reference point.

    Bisection on log sigma_s; r_s falls as sigma_s grows.
    """
    cfg = base.resolve(n)
    delta = cfg.delta if cfg.delta is not None else acc.default_delta(n)

    def share(eps, sigma_s):
        sigma_d = acc.calibrate_sigma_d(acc.PrivacySpec(eps, delta), sigma_s, cfg.q, cfg.t_d)
        return acc.certificate(q=cfg.q, sigma_d=sigma_d, t_d=cfg.t_d, sigma_s=sigma_s, delta=delta)["r_s"]

    target = share(_REF_EPS, _REF_SIGMA_S)

    def gap(s):
        try:
            return share(epsilon, s) - target
        except acc.InfeasibleBudgetError:
            return math.inf

    if gap(hi) > 0:
        raise acc.InfeasibleBudgetError("selection", f"no sigma_s <= {hi} matches the reference share at eps={epsilon}")
    if gap(lo) < 0:
        return lo
    for _ in range(40):
        mid = math.sqrt(lo * hi)
        if gap(mid) > 0:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.001:
            break
    return round(hi, 4)


def sweep_configs(axis: str, values, base: TrainConfig, n: int) -> list[tuple[float, TrainConfig | None, str]]:
    """(value, config or None, status) per sweep point."""
    if axis not in SWEEP_DEFAULTS:
        raise HarnessError(f"unknown sweep axis {axis!r}")
    if not values:
        raise HarnessError("sweep needs at least one value")
    out = []
    for v in values:
        v = float(v)
        if axis == "ratio_c":
            out.append((v, replace(base, ratio=v), "ok"))
        elif axis == "sigma_s":
            out.append((v, replace(base, sigma_s=v), "ok"))
        else:
            try:
                out.append((v, replace(base, epsilon=v, sigma_s=matched_sigma_s(v, replace(base, epsilon=v), n)), "ok"))
            except acc.InfeasibleBudgetError as err:
                out.append((v, None, f"infeasible:{err.stage}"))
    return out


def sweep(
    axis: str,
    values,
    public: DenoiserParams,
    datasets: dict[str, Dataset],
    hcfg: HarnessConfig,
    seeds=None,
) -> list[dict]:
    """One row per (value, seed); infeasible points are recorded, not run."""
    seeds = hcfg.seeds if seeds is None else seeds
    n = len(datasets["sensitive_train"])
    rows = []
    for value, cfg, status in sweep_configs(axis, values, hcfg.train, n):
        for seed in seeds:
            row = {"axis": axis, "value": value, "status": status, "seed": seed}
            if cfg is None:
                rows.append(row)
                continue
            try:
                run = run_variant("dp-sapf", public, datasets, hcfg, seed, cfg)
            except acc.InfeasibleBudgetError as err:
                rows.append({**row, "status": f"infeasible:{err.stage}"})
                continue
            row.update(run.row())
            if axis == "sigma_s":
                r_s = run.result.certificate["r_s"]
                row["selection_pct"] = 100.0 * r_s
                row["selection_over_dpsgd_pct"] = 100.0 * r_s / (1.0 - r_s)
            rows.append(row)
    return rows


SWEEP_COLUMNS = ["axis", "value", "status", "seed"] + METRIC_COLUMNS[:1] + METRIC_COLUMNS[2:] + [
    "selection_pct", "selection_over_dpsgd_pct"]


# -- whole pipeline -----------------------------------------------------------


def prepare(hcfg: HarnessConfig, seed: int):
    """Datasets and the pretrained public model for a pipeline seed."""
    datasets = gen_datasets(hcfg.toy, np.random.default_rng([seed, 100]))
    public, history = pretrain_public(
        datasets["public"], hcfg.model, hcfg.schedule(), hcfg.pretrain_steps, np.random.default_rng([seed, 101]),
        lr=hcfg.pretrain_lr, batch=hcfg.pretrain_batch, optimizer=hcfg.pretrain_optimizer,
    )
    return datasets, public, history


def summarize(rows: list[dict], key: str = "variant") -> dict:
    """Mean and std of the metrics per group."""
    groups: dict = {}
    for r in rows:
        if "mmd" in r:
            groups.setdefault(r[key], []).append(r)
    out = {}
    for name, rs in groups.items():
        out[name] = {}
        for m in ("mmd", "class_mmd", "util_acc", "final_loss"):
            vals = np.array([r[m] for r in rs], dtype=float)
            out[name][m] = {"mean": float(vals.mean()), "std": float(vals.std()), "n": len(vals)}
    return out


def write_comparison(public: DenoiserParams, datasets: dict[str, Dataset], hcfg: HarnessConfig, variants,
                     out_dir) -> dict:
    """Every variant over ``hcfg.seeds``; writes checkpoints, steps, report.json and metrics.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows, runs = [], {}
    for variant in variants:
        for s in hcfg.seeds:
            run = run_variant(variant, public, datasets, hcfg, s)
            rows.append(run.row())
            runs[f"{variant}/seed{s}"] = run.result.report()
            checkpoint.save(out / f"{variant}_seed{s}.dspf", run.result.params, run.result.trainable)
            (out / f"steps_{variant}_seed{s}.csv").write_text(steps_csv(run.result))
            if variant == variants[0] and s == hcfg.seeds[0]:
                (out / "saliency.csv").write_text(run.result.saliency.heatmap_csv())
    real_acc = real_data_accuracy(datasets, public.config.n_classes)
    report = {
        "config": hcfg.to_dict(),
        "real_data_util_acc": real_acc,
        "summary": summarize(rows),
        # Synthetic data should not beat real data; flagged rather than failed.
        "flags": [f"{r['variant']}/seed{r['seed']}: synthetic util_acc {r['util_acc']} > real {real_acc}"
                  for r in rows if r["util_acc"] > real_acc],
        "runs": runs,
    }
    write_json(out / "report.json", report)
    (out / "metrics.csv").write_text(to_csv(rows, METRIC_COLUMNS))
    return report


def run_pipeline(hcfg: HarnessConfig, out_dir, variants, seed: int = 0) -> dict:
    """Data, public model and the variant comparison, all from one seed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    datasets, public, _ = prepare(hcfg, seed)
    checkpoint.save(out / "public.dspf", public)
    return write_comparison(public, datasets, hcfg, list(variants), out)
