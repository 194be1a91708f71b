"""Seeded synthetic multi-task data ("nested clusters") and a CSV loader.

Inputs come from a two-level Gaussian mixture. Each coarse cluster owns a
random 2-D plane in which every fine class is a pair of antipodal blobs,
so the fine label is not linearly separable while the coarse label is.
A fraction ``heterogeneity`` of instances gets an inflated blob offset,
making them easier than the rest.
"""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .backbone import TaskHead

SPLITS = ("train", "val", "test")
KINDS = ("classification", "binary", "regression")


class DataFormatError(ValueError):
    pass


@dataclass
class SynthTaskSpec:
    n_train: int = 2000
    n_val: int = 1000
    n_test: int = 1000
    d: int = 16
    n_coarse: int = 4
    n_fine_per_coarse: int = 2
    heterogeneity: float = 0.5
    coarse_scale: float = 4.5
    blob_offset: float = 2.0
    easy_margin: float = 2.0
    noise: float = 1.0
    regression_task: bool = False

    def __post_init__(self):
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ValueError("every split needs at least one instance")
        if self.d < 2 or self.n_coarse > self.d:
            raise ValueError(f"d={self.d} is too small for {self.n_coarse} coarse clusters (need 2 <= n_coarse <= d)")
        if self.n_coarse < 2 or self.n_fine_per_coarse < 1:
            raise ValueError("need at least 2 coarse clusters and 1 fine class per cluster")
        if not 0.0 <= self.heterogeneity <= 1.0:
            raise ValueError("heterogeneity must be in [0, 1]")


@dataclass
class TaskDef:
    name: str
    kind: str
    n_classes: int = 0  # 0 for regression

    def head(self) -> TaskHead:
        n_out = self.n_classes if self.kind == "classification" else 1
        return TaskHead(self.name, self.kind, n_out)


@dataclass
class Split:
    x: np.ndarray
    y: list[np.ndarray]
    easy: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.x)


@dataclass
class Dataset:
    tasks: list[TaskDef]
    splits: dict[str, Split] = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.splits["train"].x.shape[1]

    def heads(self) -> list[TaskHead]:
        return [t.head() for t in self.tasks]

    def equals(self, other: Dataset) -> bool:
        if [asdict(t) for t in self.tasks] != [asdict(t) for t in other.tasks]:
            return False
        if set(self.splits) != set(other.splits):
            return False
        for name, s in self.splits.items():
            o = other.splits[name]
            if not np.array_equal(s.x, o.x) or len(s.y) != len(o.y):
                return False
            if not all(np.array_equal(a, b) for a, b in zip(s.y, o.y)):
                return False
        return True


def task_defs(spec: SynthTaskSpec) -> list[TaskDef]:
    tasks = [TaskDef("coarse", "classification", spec.n_coarse),
             TaskDef("fine", "classification", spec.n_coarse * spec.n_fine_per_coarse)]
    if spec.regression_task:
        tasks.append(TaskDef("distance", "regression"))
    return tasks


def generate(spec: SynthTaskSpec, seed: int) -> Dataset:
    rng = np.random.default_rng(seed)
    d, C, S = spec.d, spec.n_coarse, spec.n_fine_per_coarse
    basis, _ = np.linalg.qr(rng.normal(size=(d, d)))
    centers = spec.coarse_scale * basis[:, :C].T
    planes = []
    for _ in range(C):
        q, _ = np.linalg.qr(rng.normal(size=(d, 2)))
        planes.append(q.T)  # rows e1, e2
    angles = np.pi * np.arange(S) / S
    dirs = np.stack([np.cos(angles), np.sin(angles)], axis=1)  # [S, 2]

    splits = {}
    for name, n in zip(SPLITS, (spec.n_train, spec.n_val, spec.n_test)):
        fine = rng.permutation(np.arange(n) % (C * S))
        coarse = fine // S
        sub = fine % S
        sign = rng.choice([-1.0, 1.0], size=n)
        easy = rng.random(n) < spec.heterogeneity
        scale = spec.blob_offset * np.where(easy, spec.easy_margin, 1.0)
        plane = np.stack([planes[c] for c in coarse])  # [n, 2, d]
        offset = np.einsum("n,nk,nkd->nd", sign * scale, dirs[sub], plane)
        x = centers[coarse] + offset + spec.noise * rng.normal(size=(n, d))
        y = [coarse.astype(np.int64), fine.astype(np.int64)]
        if spec.regression_task:
            y.append(np.linalg.norm(x - centers[coarse], axis=1))
        splits[name] = Split(x, y, easy)
    return Dataset(task_defs(spec), splits)


# -- CSV ---------------------------------------------------------------------


def save_csv(dataset: Dataset, path, spec: SynthTaskSpec | None = None) -> None:
    path = Path(path)
    header = [f"f{j}" for j in range(dataset.d)]
    for k, t in enumerate(dataset.tasks):
        count = f":{t.n_classes}" if t.kind == "classification" else ""
        header.append(f"task{k}:{t.kind}{count}:{t.name}")
    header.append("split")
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for name in SPLITS:
            if name not in dataset.splits:
                continue
            s = dataset.splits[name]
            for i in range(len(s)):
                labels = [repr(float(y[i])) if t.kind == "regression" else str(int(y[i]))
                          for t, y in zip(dataset.tasks, s.y)]
                w.writerow([repr(float(v)) for v in s.x[i]] + labels + [name])
    if spec is not None:
        path.with_suffix(".spec.json").write_text(json.dumps(asdict(spec), indent=2, sort_keys=True))


def _parse_header(header: list[str]):
    if "split" not in header:
        raise DataFormatError("missing required column 'split'")
    feats, tasks = [], []
    for col, name in enumerate(header):
        if name == "split":
            continue
        if name.startswith("f") and name[1:].isdigit():
            if tasks:
                raise DataFormatError(f"feature column {name!r} (column {col}) after task columns")
            if int(name[1:]) != len(feats):
                raise DataFormatError(f"expected feature column f{len(feats)}, got {name!r} (column {col})")
            feats.append(col)
            continue
        # task{k}:{kind}[:{n_classes}][:{name}]
        parts = name.split(":")
        if len(parts) not in (2, 3, 4) or not parts[0].startswith("task") or not all(parts):
            raise DataFormatError(f"malformed column name {name!r} (column {col})")
        kind, rest = parts[1], parts[2:]
        if kind not in KINDS:
            raise DataFormatError(f"unknown task kind {kind!r} in column {col}")
        n_classes = 2 if kind == "binary" else 0
        if rest and rest[0].isdigit():
            if kind != "classification":
                raise DataFormatError(f"class count given for {kind} task in column {name!r} (column {col})")
            n_classes = int(rest.pop(0))
        if len(rest) > 1:
            raise DataFormatError(f"malformed column name {name!r} (column {col})")
        tasks.append((col, TaskDef(rest[0] if rest else parts[0], kind, n_classes)))
    if not feats:
        raise DataFormatError("no feature columns f0..f{d-1}")
    if not tasks:
        raise DataFormatError("no task columns task{k}:{kind}")
    return feats, tasks


def load_csv(path) -> Dataset:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("empty file")
    header = rows[0]
    feats, tasks = _parse_header(header)
    split_col = header.index("split")
    xs: dict[str, list] = {}
    ys: dict[str, list] = {}
    for r, row in enumerate(rows[1:], start=1):
        if len(row) != len(header):
            raise DataFormatError(f"row {r}: expected {len(header)} cells, got {len(row)}")
        split = row[split_col]
        if split not in SPLITS:
            raise DataFormatError(f"row {r}, column {split_col}: unknown split {split!r}")
        vals = []
        for c in feats + [c for c, _ in tasks]:
            try:
                vals.append(float(row[c]))
            except ValueError:
                raise DataFormatError(f"row {r}, column {c}: non-numeric cell {row[c]!r}") from None
        xs.setdefault(split, []).append(vals[: len(feats)])
        ys.setdefault(split, []).append(vals[len(feats):])
    inferred = []
    all_labels = np.array([v for s in ys.values() for v in s]) if ys else np.zeros((0, len(tasks)))
    for j, (col, t) in enumerate(tasks):
        if t.kind == "classification" and t.n_classes == 0 and len(all_labels):
            t = TaskDef(t.name, t.kind, int(all_labels[:, j].max()) + 1)
        inferred.append(t)
    # validate label ranges with the original row numbers
    for r, row in enumerate(rows[1:], start=1):
        for j, (col, _) in enumerate(tasks):
            t = inferred[j]
            if t.kind == "regression":
                continue
            v = float(row[col])
            if v != int(v) or v < 0 or v >= t.n_classes:
                raise DataFormatError(f"row {r}, column {col}: label {row[col]} outside [0, {t.n_classes})")
    splits = {}
    for name in SPLITS:
        if name not in xs:
            continue
        x = np.asarray(xs[name], dtype=np.float64)
        y = np.asarray(ys[name], dtype=np.float64)
        labels = [y[:, j] if t.kind == "regression" else y[:, j].astype(np.int64)
                  for j, t in enumerate(inferred)]
        splits[name] = Split(x, labels)
    return Dataset(inferred, splits)
