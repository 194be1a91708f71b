"""Per-task metrics, the relative multi-task improvement measure, cost tables."""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .backbone import BackboneSpec, ExecutionPlan, count_cost

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricSpec:
    name: str
    lower_better: bool = False

    @property
    def direction(self) -> str:
        return "lower_better" if self.lower_better else "higher_better"

    @classmethod
    def parse(cls, name: str, direction: str) -> MetricSpec:
        if direction not in ("lower_better", "higher_better"):
            raise ValueError(f"unknown metric direction {direction!r}")
        return cls(name, direction == "lower_better")


MetricValues = list[tuple[MetricSpec, "float | None"]]


def delta_task(values: MetricValues, reference: MetricValues) -> float:
    """Mean signed relative change (in percent) of a task's metrics vs single-task values.

    Metrics whose value is ``None`` (undefined, e.g. AUC on single-class
    targets) are dropped with a warning.
    """
    if len(values) != len(reference):
        raise ValueError("metric lists are not aligned")
    terms = []
    for (spec, m), (ref_spec, m_st) in zip(values, reference):
        if spec.name != ref_spec.name or spec.lower_better != ref_spec.lower_better:
            raise ValueError(f"metric {spec.name!r} does not match reference {ref_spec.name!r}")
        if m is None or m_st is None:
            log.warning("metric %s is undefined; excluded from delta", spec.name)
            continue
        if m_st == 0:
            raise ZeroDivisionError(f"single-task reference for {spec.name!r} is zero")
        sign = -1.0 if spec.lower_better else 1.0
        terms.append(sign * (m - m_st) / m_st)
    if not terms:
        raise ValueError("no defined metrics to compare")
    return 100.0 * sum(terms) / len(terms)


def delta_overall(per_task: Sequence[float]) -> float:
    if len(per_task) == 0:
        raise ValueError("need at least one task delta")
    return float(sum(per_task) / len(per_task))


# -- metric computations ----------------------------------------------------


def auc_roc(scores, labels) -> float | None:
    """Area under the ROC curve as a Mann-Whitney rank statistic (ties averaged)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel().astype(bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        log.warning("AUC undefined: targets contain a single class")
        return None
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def task_metrics(predictions, targets, kind: str, ratio_threshold: float = 1.25) -> MetricValues:
    pred = np.asarray(predictions, dtype=np.float64)
    y = np.asarray(targets)
    if kind == "classification":
        labels = y.astype(np.int64)
        if np.any(labels < 0) or np.any(labels >= pred.shape[1]):
            raise ValueError("class label out of range")
        logp = _log_softmax(pred)
        acc = float(np.mean(pred.argmax(axis=1) == labels))
        ce = float(-np.mean(logp[np.arange(len(labels)), labels]))
        return [(MetricSpec("accuracy"), acc), (MetricSpec("cross_entropy", True), ce)]
    if kind == "binary":
        return [(MetricSpec("auc"), auc_roc(pred.reshape(len(y), -1)[:, 0], y))]
    if kind == "regression":
        p = pred.reshape(len(y), -1)[:, 0]
        y = y.astype(np.float64)
        mse = float(np.mean((p - y) ** 2))
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.maximum(p / y, y / p)
        within = float(np.mean((p > 0) & (y > 0) & (ratio < ratio_threshold)))
        return [(MetricSpec("mse", True), mse), (MetricSpec(f"within_{ratio_threshold:g}"), within)]
    raise ValueError(f"unknown task kind {kind!r}")


# -- single-task references -----------------------------------------------

SingleTaskReference = dict[str, MetricValues]


def write_reference(ref: SingleTaskReference, path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["task", "metric", "direction", "value"])
        for task, values in ref.items():
            for spec, v in values:
                w.writerow([task, spec.name, spec.direction, "" if v is None else repr(float(v))])


def read_reference(path) -> SingleTaskReference:
    ref: SingleTaskReference = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["task", "metric", "direction", "value"]:
            raise ValueError(f"reference header must be task,metric,direction,value; got {reader.fieldnames}")
        for i, row in enumerate(reader, start=1):
            v = None if row["value"] == "" else float(row["value"])
            if v is not None and not np.isfinite(v):
                raise ValueError(f"row {i}: non-finite reference value")
            ref.setdefault(row["task"], []).append((MetricSpec.parse(row["metric"], row["direction"]), v))
    return ref


def delta_report(per_task_values: dict[str, MetricValues], ref: SingleTaskReference) -> dict:
    per_task = {task: delta_task(vals, ref[task]) for task, vals in per_task_values.items()}
    return {"per_task": per_task, "overall": delta_overall(list(per_task.values()))}


# -- cost table ----------------------------------------------------------------


@dataclass
class CostRow:
    variant: str
    target_rate: float
    params: int
    expected_flops: float
    delta: float | None


def cost_report(spec: BackboneSpec, variants: Sequence[dict]) -> list[CostRow]:
    """One row per variant; each dict has name, target_rate, plan, gate_rates, delta."""
    rows = []
    for v in variants:
        plan = v["plan"] if isinstance(v["plan"], ExecutionPlan) else ExecutionPlan(v["plan"])
        params, flops = count_cost(spec, plan, v.get("gate_rates"))
        rows.append(CostRow(v["name"], float(v.get("target_rate", 1.0)), params, flops, v.get("delta")))
    return rows


def write_rows(rows: Sequence, path) -> None:
    dicts = [asdict(r) if not isinstance(r, dict) else r for r in rows]
    if not dicts:
        Path(path).write_text("")
        return
    with Path(path).open("w", newline="") as fh:
        fields = list(dict.fromkeys(k for d in dicts for k in d))
        w = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for d in dicts:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in d.items()})
