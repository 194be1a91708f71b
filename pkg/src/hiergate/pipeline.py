"""Experiment orchestration: single-task references, policy training,
plan selection, target-rate sweeps, and the artifacts they leave behind.

A run directory holds::

    reference.csv      single-task metric references
    policy.csv         learned execute probabilities, one row per block
    summary.json       deltas, selected plans, cost rows, config hash, seed
    metrics.csv        per variant / split / task / metric values
    gate_rates.csv     per-block execute rates and probability histograms
    cost.csv           params and expected FLOPs per variant
    plotdata.csv       delta and FLOPs against target rate
    checkpoints/       trainer state and retrained models (JSON)
    predictions/       raw validation outputs per variant (npz)
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import Backbone, BackboneSpec, ExecutionPlan, count_cost
from .config import ConfigError, ExperimentConfig
from .data import Dataset, generate, load_csv
from .losses import LossWeights
from .metrics import (CostRow, SingleTaskReference, delta_task, delta_overall, read_reference,
                      task_metrics, write_reference, write_rows)
from .policy import PolicyDistribution, policy_csv
from .trainer import (Candidate, EvalResult, RetrainResult, Retrainer, Trainer, TrainConfig,
                      evaluate, plan_seed, sample_plans, select_best)

log = logging.getLogger(__name__)

ARTIFACTS = ("summary.json", "metrics.csv", "policy.csv", "gate_rates.csv", "cost.csv", "plotdata.csv")
HIST_BINS = 10


class MissingArtifactError(FileNotFoundError):
    def __init__(self, missing: Sequence[str], where):
        self.missing = list(missing)
        super().__init__(f"missing artifact(s) in {where}: {', '.join(self.missing)}")


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    if cfg.dataset.source == "synth":
        return generate(cfg.dataset.synth, cfg.seed)
    path = Path(cfg.dataset.path)
    if not path.exists():
        raise MissingArtifactError([str(path)], path.parent)
    return load_csv(path)


# -- retraining jobs (picklable, so they can run in worker processes) -------------


@dataclass
class RetrainJob:
    spec: BackboneSpec
    plan: ExecutionPlan
    weights: LossWeights
    gated: bool
    seed: list[int]
    task_ids: list[int] | None = None
    init: dict | None = None  # network parameters to start from instead of a fresh init


def run_job(train_cfg: TrainConfig, data: Dataset, job: RetrainJob) -> RetrainResult:
    bb = Backbone.init(job.spec, np.random.default_rng(job.seed))
    if job.init:
        bb.load_snapshot({n: a for n, a in job.init.items()
                          if n in bb.params and bb.params[n].shape == a.shape and not n.startswith("gate")})
    return Retrainer(train_cfg, data, bb, job.plan, job.weights, use_gates=job.gated,
                     seed=job.seed, task_ids=job.task_ids).fit()


def _run_job_packed(args):
    return run_job(*args)


# -- variants ---------------------------------------------------------------------


@dataclass
class Variant:
    name: str
    target_rate: float
    gated: bool
    plan: ExecutionPlan
    val: EvalResult
    test: EvalResult
    val_delta: float
    test_delta: float
    val_task_delta: dict[str, float]
    test_task_delta: dict[str, float]
    params: int
    expected_flops: float
    train_rates: np.ndarray | None = None
    result: RetrainResult | None = None
    candidates: list[Candidate] = field(default_factory=list)

    @property
    def slug(self) -> str:
        return self.name.replace("@t=", "_t")

    def to_json(self) -> dict:
        def metrics(ev):
            return {task: {s.name: v for s, v in vals} for task, vals in ev.metrics.items()}
        return {
            "name": self.name,
            "target_rate": self.target_rate,
            "gated": self.gated,
            "plan": self.plan.u.tolist(),
            "val_delta": self.val_delta,
            "test_delta": self.test_delta,
            "val_task_delta": self.val_task_delta,
            "test_task_delta": self.test_task_delta,
            "val_metrics": metrics(self.val),
            "test_metrics": metrics(self.test),
            "eval_gate_rates": self.val.gate_rates.tolist(),
            "train_gate_rates": None if self.train_rates is None else
            [None if np.isnan(r) else float(r) for r in self.train_rates],
            "params": self.params,
            "expected_flops": self.expected_flops,
            "candidates": [{"index": c.index, "plan": c.plan.u.tolist(), "val_delta": c.delta,
                            "expected_flops": c.flops} for c in self.candidates],
        }


def _task_deltas(ev: EvalResult, ref: SingleTaskReference) -> dict[str, float]:
    return {name: delta_task(vals, ref[name]) for name, vals in ev.metrics.items()}


class Experiment:
    """One configured experiment bound to a run directory."""

    def __init__(self, cfg: ExperimentConfig, out=None, workers: int = 1, data: Dataset | None = None):
        self.cfg = cfg
        self.out = Path(out if out is not None else cfg.output_dir)
        self.workers = max(1, int(workers))
        self.data = data if data is not None else load_dataset(cfg)
        self.spec = cfg.backbone.build(self.data.d, self.data.heads())
        if len(cfg.losses.task) != self.spec.K:
            raise ConfigError(f"losses.task has {len(cfg.losses.task)} weights for {self.spec.K} tasks")
        self.train_cfg = cfg.train
        self.trainer: Trainer | None = None

    # -- helpers ---------------------------------------------------------------
    def path(self, *parts) -> Path:
        p = self.out.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def weights(self, target_rate: float, task_ids: Sequence[int] | None = None) -> LossWeights:
        task = self.cfg.losses.task if task_ids is None else [self.cfg.losses.task[k] for k in task_ids]
        return dataclasses.replace(self.cfg.losses, task=list(task), target_rate=target_rate)

    def retrain_many(self, jobs: Sequence[RetrainJob]) -> list[RetrainResult]:
        if self.workers == 1 or len(jobs) <= 1:
            return [run_job(self.train_cfg, self.data, j) for j in jobs]
        with ProcessPoolExecutor(max_workers=min(self.workers, len(jobs))) as pool:
            return list(pool.map(_run_job_packed, [(self.train_cfg, self.data, j) for j in jobs]))

    def _eval(self, bb: Backbone, plan: ExecutionPlan, split: str, gated: bool,
              task_ids=None) -> EvalResult:
        rng = np.random.default_rng([self.cfg.seed, 4])
        return evaluate(bb, plan, self.data.splits[split], self.data, task_ids, use_gates=gated,
                        eval_gate=self.train_cfg.eval_gate, rng=rng,
                        ratio_threshold=self.train_cfg.ratio_threshold)

    def _init_params(self):
        if self.train_cfg.retrain_from == "trained":
            if self.trainer is None:
                self.trainer = self.load_trainer()
            return self.trainer.backbone.snapshot()
        return None

    def job(self, plan: ExecutionPlan, target_rate: float, gated: bool) -> RetrainJob:
        # same spec (and so the same initial weights) whether or not gates are used
        return RetrainJob(self.spec, plan, self.weights(target_rate), gated,
                          plan_seed(self.cfg.seed, plan), init=self._init_params())

    def make_variant(self, name: str, res: RetrainResult, target_rate: float, gated: bool,
                     ref: SingleTaskReference) -> Variant:
        val = self._eval(res.backbone, res.plan, "val", gated)
        test = self._eval(res.backbone, res.plan, "test", gated)
        vtd, ttd = _task_deltas(val, ref), _task_deltas(test, ref)
        spec = self.spec if gated else self.spec.ungated()
        params, flops = count_cost(spec, res.plan, val.gate_rates if gated else None)
        return Variant(name, target_rate, gated, res.plan, val, test,
                       delta_overall(list(vtd.values())), delta_overall(list(ttd.values())),
                       vtd, ttd, params, flops, res.train_rates, res)

    # -- stages ------------------------------------------------------------------
    def single_task(self) -> SingleTaskReference:
        """Train one ungated backbone per task and write ``reference.csv``."""
        jobs = [RetrainJob(self.spec.single_task(k), ExecutionPlan.all_ones(self.spec.L, 1),
                           self.weights(1.0, [k]), False, [self.cfg.seed, 5, k], task_ids=[k])
                for k in range(self.spec.K)]
        ref: SingleTaskReference = {}
        for k, res in enumerate(self.retrain_many(jobs)):
            ev = self._eval(res.backbone, res.plan, "val", False, task_ids=[k])
            ref.update(ev.metrics)
            self._save_model(f"single_task{k}", res)
        write_reference(ref, self.path("reference.csv"))
        return ref

    def reference(self, compute: bool = True) -> SingleTaskReference:
        p = self.out / "reference.csv"
        if p.exists():
            return read_reference(p)
        if not compute:
            raise MissingArtifactError(["reference.csv"], self.out)
        return self.single_task()

    def hard_sharing(self, ref) -> Variant:
        plan = ExecutionPlan.all_ones(self.spec.L, self.spec.K)
        job = dataclasses.replace(self.job(plan, 1.0, False), init=None)
        (res,) = self.retrain_many([job])
        return self.make_variant("hard_sharing", res, 1.0, False, ref)

    def train_policy(self) -> PolicyDistribution:
        bb = Backbone.init(self.spec, np.random.default_rng([self.cfg.seed, 7]))
        policy = PolicyDistribution(self.spec.L, self.spec.K, self.spec.always_on_mask)
        self.trainer = Trainer(self.train_cfg, self.data, bb, policy, self.cfg.losses)
        self.trainer.fit()
        self.trainer.save(self.path("checkpoints", "trainer.json"))
        self.path("policy.csv").write_text(policy_csv(policy.alpha(), [t.name for t in self.data.tasks]))
        write_rows(self.trainer.history, self.path("train_history.csv"))
        return policy

    def load_trainer(self) -> Trainer:
        p = self.out / "checkpoints" / "trainer.json"
        if not p.exists():
            raise MissingArtifactError(["checkpoints/trainer.json"], self.out)
        bb = Backbone.init(self.spec, np.random.default_rng(0))
        policy = PolicyDistribution(self.spec.L, self.spec.K, self.spec.always_on_mask)
        tr = Trainer(self.train_cfg, self.data, bb, policy, self.cfg.losses)
        tr.load(p)
        return tr

    def select(self, name: str, policy: PolicyDistribution | None, gated: bool, target_rate: float,
               ref, plans: Sequence[ExecutionPlan] | None = None) -> Variant:
        """Retrain every distinct sampled plan and keep the best validation delta."""
        plans = list(plans) if plans is not None else sample_plans(self.train_cfg, policy)
        unique = list({p.key(): p for p in plans}.values())
        done = dict(zip([p.key() for p in unique],
                        self.retrain_many([self.job(p, target_rate, gated) for p in unique])))
        variants: dict[tuple, Variant] = {}

        def evaluate_fn(res):
            v = self.make_variant(name, res, target_rate, gated, ref)
            variants[res.plan.key()] = v
            return v.val_delta, (v.val.gate_rates if gated else None)

        spec = self.spec if gated else self.spec.ungated()
        best, cands = select_best(self.train_cfg, self.data, policy, lambda i, p: done[p.key()],
                                  evaluate_fn, plans=plans, spec=spec)
        v = variants[best.plan.key()]
        v.candidates = cands
        return v

    def sweep(self, base: Variant, rates: Sequence[float], ref, prefix: str) -> list[Variant]:
        """Retrain ``base.plan`` once per target rate (reusing ``base`` at its own rate)."""
        todo = [t for t in rates if t != base.target_rate]
        results = dict(zip(todo, self.retrain_many([self.job(base.plan, t, True) for t in todo])))
        out = []
        for t in rates:
            v = base if t == base.target_rate else self.make_variant(f"{prefix}@t={t:g}", results[t], t, True, ref)
            out.append(v)
        return out

    # -- whole pipeline ------------------------------------------------------------
    def run(self, ablation: str | None = None, reuse_reference: bool = True) -> dict:
        ablation = ablation or self.cfg.ablation
        t0 = self.cfg.losses.target_rate
        variants: list[Variant] = []
        policy = None
        try:
            ref = self.reference(compute=True) if reuse_reference else self.single_task()
            variants.append(self.hard_sharing(ref))
            sweep: list[Variant] = []
            if ablation in ("none", "task_only"):
                policy = self.train_policy()
                variants.append(self.select("task_only", policy, False, 1.0, ref))
            if ablation == "none":
                full = self.select("full", policy, True, t0, ref)
                variants.append(full)
                sweep = self.sweep(full, self.cfg.target_rates, ref, "full")
            elif ablation == "instance_only":
                plan = ExecutionPlan.all_ones(self.spec.L, self.spec.K)
                inst = self.select("instance_only", None, True, t0, ref, plans=[plan])
                variants.append(inst)
                sweep = self.sweep(inst, self.cfg.target_rates, ref, "instance_only")
            variants += [v for v in sweep if not any(v is x for x in variants)]
        except Exception:
            self._write_partial(variants)
            raise
        return self.write(variants, policy, sweep, ablation)

    # -- artifacts -------------------------------------------------------------------
    def _save_model(self, slug: str, res: RetrainResult) -> None:
        self.path("checkpoints", f"{slug}.json").write_text(json.dumps(res.backbone.to_dict(res.plan)))

    def _save_predictions(self, v: Variant) -> None:
        arrays = {}
        for k, (task, out) in enumerate(zip(v.val.metrics, v.val.outputs)):
            arrays[f"output{k}"] = out
            arrays[f"target{k}"] = self.data.splits["val"].y[k]
        with self.path("predictions", f"{v.slug}.npz").open("wb") as fh:
            np.savez(fh, **arrays)

    def _write_partial(self, variants: list[Variant]) -> None:
        doc = {"status": "aborted", "variants": [v.to_json() for v in variants]}
        self.path("summary.partial.json").write_text(json.dumps(doc, indent=2, sort_keys=True))

    def write(self, variants: list[Variant], policy, sweep: list[Variant], ablation: str) -> dict:
        cfg = self.cfg
        for v in variants:
            if v.result is not None:
                self._save_model(v.slug, v.result)
            self._save_predictions(v)
        if policy is None:
            # no learned policy: report the fixed plan that was used
            used = next((v.plan for v in variants if v.name == ablation), variants[0].plan)
            self.path("policy.csv").write_text(policy_csv(used.u, [t.name for t in self.data.tasks]))
        self._write_metrics(variants)
        self._write_gate_rates(variants)
        cost_rows = [CostRow(v.name, v.target_rate, v.params, v.expected_flops, v.val_delta) for v in variants]
        write_rows(cost_rows, self.path("cost.csv"))
        write_rows([{"target_rate": v.target_rate, "val_delta": v.val_delta, "test_delta": v.test_delta,
                     "params": v.params, "expected_flops": v.expected_flops,
                     "mean_gate_rate": float(np.mean(v.val.gate_rates[self.spec.gate_enable_mask]))
                     if any(self.spec.gate_enable_mask) else 1.0}
                    for v in sorted(sweep, key=lambda v: -v.target_rate)], self.path("plotdata.csv"))
        summary = {
            "config_hash": cfg.config_hash(),
            "seed": cfg.seed,
            "timestamp": datetime.now(timezone.utc).isoformat(),
            "ablation": ablation,
            "primary_target_rate": cfg.losses.target_rate,
            "tasks": [dataclasses.asdict(t) for t in self.data.tasks],
            "delta": {v.name: v.val_delta for v in variants},
            "test_delta": {v.name: v.test_delta for v in variants},
            "policy_alpha": None if policy is None else policy.alpha().tolist(),
            "variants": [v.to_json() for v in variants],
            "cost": [dataclasses.asdict(r) for r in cost_rows],
            "config": cfg.to_dict(),
        }
        self.path("summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
        (self.out / "summary.partial.json").unlink(missing_ok=True)
        return summary

    def _write_metrics(self, variants: list[Variant]) -> None:
        with self.path("metrics.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "target_rate", "split", "task", "metric", "direction", "value", "task_delta"])
            for v in variants:
                for split, ev, td in (("val", v.val, v.val_task_delta), ("test", v.test, v.test_task_delta)):
                    for task, vals in ev.metrics.items():
                        for s, m in vals:
                            w.writerow([v.name, repr(v.target_rate), split, task, s.name, s.direction,
                                        "" if m is None else repr(m), repr(td[task])])

    def _write_gate_rates(self, variants: list[Variant]) -> None:
        edges = np.linspace(0.0, 1.0, HIST_BINS + 1)
        with self.path("gate_rates.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["variant", "target_rate", "block", "train_rate", "eval_rate",
                        *[f"hist_{edges[i]:.1f}_{edges[i + 1]:.1f}" for i in range(HIST_BINS)]])
            for v in variants:
                if not v.gated:
                    continue
                for l in np.flatnonzero(self.spec.gate_enable_mask):
                    probs = v.val.gate_probs.get(int(l))
                    hist = np.histogram(probs, bins=edges)[0] if probs is not None else np.zeros(HIST_BINS, int)
                    tr = v.train_rates[l] if v.train_rates is not None else np.nan
                    w.writerow([v.name, repr(v.target_rate), int(l), "" if np.isnan(tr) else repr(float(tr)),
                                repr(float(v.val.gate_rates[l])), *hist.tolist()])


def run_pipeline(cfg: ExperimentConfig, out=None, workers: int = 1, ablation: str | None = None) -> dict:
    return Experiment(cfg, out, workers).run(ablation)


# -- reporting ------------------------------------------------------------------------


def recompute_delta(pred_path, ref: SingleTaskReference, tasks, ratio_threshold: float = 1.25) -> float:
    """Validation delta recomputed from saved raw predictions."""
    with np.load(pred_path) as z:
        per_task = []
        for k, t in enumerate(tasks):
            vals = task_metrics(z[f"output{k}"], z[f"target{k}"], t["kind"], ratio_threshold)
            per_task.append(delta_task(vals, ref[t["name"]]))
    return delta_overall(per_task)


def report(output_dir) -> dict:
    """Join a finished run's artifacts into ``report.json`` and ``report.csv``."""
    out = Path(output_dir)
    required = [*ARTIFACTS, "reference.csv"]
    missing = [name for name in required if not (out / name).exists()]
    if missing:
        raise MissingArtifactError(missing, out)
    summary = json.loads((out / "summary.json").read_text())
    ref = read_reference(out / "reference.csv")
    cfg = summary["config"]
    tasks = summary["tasks"]
    rows = []
    for v in summary["variants"]:
        pred = out / "predictions" / f"{v['name'].replace('@t=', '_t')}.npz"
        if not pred.exists():
            raise MissingArtifactError([str(pred.relative_to(out))], out)
        recomputed = recompute_delta(pred, ref, tasks, cfg["train"]["ratio_threshold"])
        if not np.isclose(recomputed, v["val_delta"], rtol=0, atol=1e-9):
            raise ValueError(f"{v['name']}: summary delta {v['val_delta']} != recomputed {recomputed}")
        rows.append({"variant": v["name"], "target_rate": v["target_rate"], "val_delta": v["val_delta"],
                     "test_delta": v["test_delta"], "params": v["params"],
                     "expected_flops": v["expected_flops"]})
    doc = {
        "config_hash": summary["config_hash"],
        "seed": summary["seed"],
        "timestamp": summary["timestamp"],
        "ablation": summary["ablation"],
        "delta": summary["delta"],
        "test_delta": summary["test_delta"],
        "per_task": {v["name"]: {"val": v["val_task_delta"], "test": v["test_task_delta"],
                                 "metrics": v["val_metrics"]} for v in summary["variants"]},
        "cost": summary["cost"],
    }
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True))
    write_rows(rows, out / "report.csv")
    return doc

