"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 numerical divergence,
4 missing artifact.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .backbone import Backbone, ExecutionPlan
from .data import DataFormatError, save_csv
from .pipeline import Experiment, MissingArtifactError, load_dataset, report
from .policy import policy_csv
from .trainer import DivergenceError, RetrainResult

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_MISSING = 0, 2, 3, 4

log = logging.getLogger("hiergate")


def _rates(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(" ", "").split(",") if v]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma-separated list of numbers: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config (defaults if omitted)")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--target-rates", type=_rates, help="comma-separated target execute rates")
    common.add_argument("--ablation", choices=C.ABLATIONS, help="override the config ablation mode")
    common.add_argument("--out", type=Path, help="run directory (default: output_dir from config)")
    common.add_argument("--workers", type=int, default=1, help="parallel retrain processes")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="hiergate", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("gen-data", "write the configured dataset to <out>/data.csv"),
        ("single-task", "train one model per task and write reference.csv"),
        ("train", "learn the task execution policy (warm-up then alternating updates)"),
        ("retrain", "sample plans from the trained policy, retrain, keep the best"),
        ("evaluate", "evaluate the selected model on validation and test splits"),
        ("sweep", "retrain the selected plan at each target rate and write cost tables"),
        ("report", "consolidate a finished run directory"),
        ("ablate", "run the whole pipeline under an ablation mode"),
        ("run", "run the whole pipeline"),
    ]:
        sub.add_parser(name, parents=[common], help=help_)
    return p


def load_config(args) -> C.ExperimentConfig:
    cfg = C.load(args.config) if args.config else C.ExperimentConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.target_rates is not None:
        changes["target_rates"] = args.target_rates
    if args.ablation is not None:
        changes["ablation"] = args.ablation
    if args.out is not None:
        changes["output_dir"] = str(args.out)
    return cfg.replace(**changes) if changes else cfg


def _selected(exp: Experiment):
    p = exp.out / "checkpoints" / "selected.json"
    if not p.exists():
        raise MissingArtifactError(["checkpoints/selected.json"], exp.out)
    doc = json.loads(p.read_text())
    bb, plan = Backbone.from_dict(doc["model"])
    return bb, plan, doc


def dispatch(args, cfg: C.ExperimentConfig) -> dict | None:
    cmd = args.command
    out = Path(cfg.output_dir)
    if cmd == "report":
        return report(out)
    if cmd == "gen-data":
        data = load_dataset(cfg)
        out.mkdir(parents=True, exist_ok=True)
        save_csv(data, out / "data.csv", cfg.dataset.synth if cfg.dataset.source == "synth" else None)
        return {"data": str(out / "data.csv"), "splits": {k: len(v) for k, v in data.splits.items()}}
    exp = Experiment(cfg, out, args.workers)
    if cmd == "single-task":
        ref = exp.single_task()
        return {"reference": {t: {s.name: v for s, v in vals} for t, vals in ref.items()}}
    if cmd == "train":
        policy = exp.train_policy()
        return {"alpha": policy.alpha().tolist()}
    if cmd == "retrain":
        ref = exp.reference(compute=False)
        gated = cfg.ablation != "task_only"
        t = cfg.losses.target_rate if gated else 1.0
        if cfg.ablation == "instance_only":
            v = exp.select("instance_only", None, True, t, ref,
                           plans=[ExecutionPlan.all_ones(exp.spec.L, exp.spec.K)])
        else:
            v = exp.select("task_only" if not gated else "full", exp.load_trainer().policy, gated, t, ref)
        doc = {"name": v.name, "target_rate": t, "gated": gated, "val_delta": v.val_delta,
               "model": v.result.backbone.to_dict(v.plan)}
        exp.path("checkpoints", "selected.json").write_text(json.dumps(doc))
        return {"name": v.name, "plan": v.plan.u.tolist(), "val_delta": v.val_delta}
    if cmd == "evaluate":
        ref = exp.reference(compute=False)
        bb, plan, doc = _selected(exp)
        v = exp.make_variant(doc["name"], RetrainResult(bb, plan), doc["target_rate"], doc["gated"], ref)
        exp._write_metrics([v])
        return {"name": v.name, "val_delta": v.val_delta, "test_delta": v.test_delta}
    if cmd == "sweep":
        ref = exp.reference(compute=False)
        bb, plan, doc = _selected(exp)
        base = exp.make_variant(doc["name"], RetrainResult(bb, plan), doc["target_rate"], True, ref)
        variants = exp.sweep(base, cfg.target_rates, ref, doc["name"])
        if not (exp.out / "policy.csv").exists():
            exp.path("policy.csv").write_text(policy_csv(plan.u, [t.name for t in exp.data.tasks]))
        summary = exp.write(variants, None, variants, cfg.ablation)
        return {"delta": summary["delta"]}
    if cmd in ("run", "ablate"):
        summary = exp.run(cfg.ablation)
        return {"delta": summary["delta"], "test_delta": summary["test_delta"]}
    raise AssertionError(cmd)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        result = dispatch(args, cfg)
    except C.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataFormatError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    if result is not None:
        print(json.dumps(result, indent=2, sort_keys=True, default=_jsonable))
    return EXIT_OK


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


if __name__ == "__main__":
    sys.exit(main())
