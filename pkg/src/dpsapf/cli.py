"""Command-line entry point: ``dpsapf <subcommand> [--config C] [--seed S] [--out DIR]``.

Exit status is 0 on success, 2 when a privacy target is infeasible and 1
on any other failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import accountant as acc
from . import checkpoint
from .harness import experiment as ex
from .harness.data import gen_datasets, load_dataset, save_dataset
from .harness.metrics import evaluate
from .trainer import TrainConfig, privacy_certificate, run_selection, substream, train

SPLITS = ("public", "sensitive_train", "sensitive_test")


def _load_config(path) -> tuple[ex.HarnessConfig, dict]:
    """Harness config plus ``data_dir``/``model_path``; top-level TrainConfig keys override ``train``."""
    raw = json.loads(Path(path).read_text()) if path else {}
    paths = {k: raw.pop(k) for k in ("data_dir", "model_path") if k in raw}
    overrides = {k: raw.pop(k) for k in list(raw) if k in TrainConfig.__dataclass_fields__}
    hcfg = ex.HarnessConfig.from_dict(raw)
    if overrides:
        hcfg = replace(hcfg, train=TrainConfig.from_dict({**hcfg.train.to_dict(), **overrides}))
    return hcfg, paths


def _datasets(data_dir) -> dict:
    d = Path(data_dir)
    return {name: load_dataset(d / f"{name}.npz") for name in SPLITS}


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args, hcfg, paths):
    out = _out(args)
    data = gen_datasets(hcfg.toy, np.random.default_rng([args.seed, 100]))
    for name, ds in data.items():
        save_dataset(out / f"{name}.npz", ds)
    ex.write_json(out / "toy.json", hcfg.toy.to_dict())
    return {name: len(ds) for name, ds in data.items()}


def cmd_pretrain(args, hcfg, paths):
    out = _out(args)
    data = load_dataset(Path(args.data or paths.get("data_dir", args.out)) / "public.npz")
    params, history = ex.pretrain_public(
        data, hcfg.model, hcfg.schedule(), hcfg.pretrain_steps, np.random.default_rng([args.seed, 101]),
        lr=hcfg.pretrain_lr, batch=hcfg.pretrain_batch, optimizer=hcfg.pretrain_optimizer,
    )
    checkpoint.save(out / "public.dspf", params)
    (out / "pretrain_loss.csv").write_text(ex.to_csv([{"step": i, "loss": v} for i, v in enumerate(history)]))
    return {"first_loss": history[0], "last_loss": history[-1], "steps": len(history)}


def _model_and_data(args, paths):
    model = args.model or paths.get("model_path") or str(Path(args.out) / "public.dspf")
    params, _ = checkpoint.load(model)
    return params, _datasets(args.data or paths.get("data_dir", args.out))


def cmd_select(args, hcfg, paths):
    out = _out(args)
    params, data = _model_and_data(args, paths)
    sens = data["sensitive_train"]
    cfg = replace(hcfg.train, seed=args.seed).resolve(len(sens))
    report = run_selection(params, sens, cfg, hcfg.schedule(), substream(args.seed, "selection"))
    ex.write_json(out / "saliency.json", report.to_dict())
    (out / "saliency.csv").write_text(report.heatmap_csv())
    return {"selected": [str(m) for m in report.selected]}


def cmd_train(args, hcfg, paths):
    out = _out(args)
    params, data = _model_and_data(args, paths)
    cfg = replace(hcfg.train, seed=args.seed)
    result = train(params, data["sensitive_train"], cfg, hcfg.schedule())
    checkpoint.save(out / "model.dspf", result.params)
    checkpoint.save(out / "adapters.dspf", params, result.trainable)
    (out / "steps.csv").write_text(ex.steps_csv(result))
    report = result.report()
    if args.evaluate:
        test = data["sensitive_test"]
        sx, sy = ex.synthesize(result.params, hcfg.schedule(), hcfg.synth_per_test * len(test),
                               substream(args.seed, "eval"))
        metrics = evaluate(sx, sy, test.x, test.y, params.config.n_classes)
        report["metrics"] = metrics.to_dict()
        (out / "metrics.csv").write_text(ex.to_csv([metrics.to_dict()], ["mmd", "class_mmd", "util_acc"]))
    ex.write_json(out / "report.json", report)
    (out / "saliency.csv").write_text(result.saliency.heatmap_csv())
    return {"certificate": result.certificate, "final_loss": result.final_loss}


def cmd_account(args, hcfg, paths):
    cfg = hcfg.train
    n = args.n or hcfg.toy.n_sensitive
    if args.q is not None:
        cfg = replace(cfg, q=args.q)
    for key in ("t_d", "sigma_s", "epsilon", "sigma_d", "delta"):
        if getattr(args, key) is not None:
            cfg = replace(cfg, **{key: getattr(args, key)})
    cfg = cfg.resolve(n)
    delta = cfg.delta if cfg.delta is not None else acc.default_delta(n)
    out = {}
    if cfg.sigma_d is None:
        sigma_d = acc.calibrate_sigma_d(acc.PrivacySpec(cfg.epsilon, delta), cfg.sigma_s, cfg.q, cfg.t_d)
        out["calibrated_sigma_d"] = sigma_d
    else:
        sigma_d = cfg.sigma_d
    cert = privacy_certificate(cfg, cfg.sigma_s, sigma_d, n)
    out.update({k: cert[k] for k in ("epsilon", "alpha_star", "gamma_total", "r_s", "r_d")})
    if args.out:
        ex.write_json(_out(args) / "account.json", out)
    return out


def cmd_sweep(args, hcfg, paths):
    out = _out(args)
    params, data = _model_and_data(args, paths)
    values = args.values or ex.SWEEP_DEFAULTS[args.axis]
    if args.seeds is not None:
        hcfg = replace(hcfg, seeds=tuple(args.seeds))
    rows = ex.sweep(args.axis, values, params, data, hcfg)
    (out / f"sweep_{args.axis}.csv").write_text(ex.to_csv(rows, ex.SWEEP_COLUMNS))
    return {"rows": len(rows), "infeasible": sum(r["status"] != "ok" for r in rows)}


def cmd_report(args, hcfg, paths):
    out = _out(args)
    params, data = _model_and_data(args, paths)
    if args.seeds is not None:
        hcfg = replace(hcfg, seeds=tuple(args.seeds))
    report = ex.write_comparison(params, data, hcfg, args.variants, out)
    return report["summary"]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON harness config (TrainConfig keys may sit at top level)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", default=".", help="output directory")

    model_data = argparse.ArgumentParser(add_help=False)
    model_data.add_argument("--data", help="directory with the .npz splits (default: --out)")
    model_data.add_argument("--model", help="public model checkpoint (default: OUT/public.dspf)")

    p = argparse.ArgumentParser(prog="dpsapf", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="generate the toy public/sensitive splits")
    sp = sub.add_parser("pretrain", parents=[common], help="train the public model")
    sp.add_argument("--data")
    sub.add_parser("select", parents=[common, model_data], help="run parameter selection only")
    sp = sub.add_parser("train", parents=[common, model_data], help="select and fine-tune once")
    sp.add_argument("--evaluate", action="store_true", help="also sample and score synthetic data")
    sp = sub.add_parser("account", parents=[common], help="privacy accounting for a configuration")
    sp.add_argument("--n", type=int, help="sensitive dataset size")
    sp.add_argument("--q", type=float)
    sp.add_argument("--t-d", dest="t_d", type=int)
    sp.add_argument("--sigma-s", dest="sigma_s", type=float)
    sp.add_argument("--sigma-d", dest="sigma_d", type=float, help="skip calibration and use this value")
    sp.add_argument("--epsilon", type=float)
    sp.add_argument("--delta", type=float)
    sp = sub.add_parser("sweep", parents=[common, model_data], help="sweep epsilon, ratio_c or sigma_s")
    sp.add_argument("--axis", required=True, choices=sorted(ex.SWEEP_DEFAULTS))
    sp.add_argument("--values", type=float, nargs="*")
    sp.add_argument("--seeds", type=int, nargs="*")
    sp = sub.add_parser("report", parents=[common, model_data], help="compare fine-tuning variants")
    sp.add_argument("--variants", nargs="+", default=["dp-sapf", "random", "all-attention", "non-private"],
                    choices=sorted(ex.VARIANTS))
    sp.add_argument("--seeds", type=int, nargs="*")
    return p


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "select": cmd_select,
    "train": cmd_train,
    "account": cmd_account,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        hcfg, paths = _load_config(args.config)
        result = COMMANDS[args.command](args, hcfg, paths)
    except acc.InfeasibleBudgetError as err:
        print(f"infeasible privacy target ({err.stage}): {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - every other failure maps to status 1
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    print(ex.dumps(result), end="")
    return 0


if __name__ == "__main__":
    sys.exit(main())
