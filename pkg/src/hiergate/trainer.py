"""Policy training (warm-up, then alternating weight/policy epochs) and plan retraining."""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import losses as Lo
from . import tensor as T
from .backbone import Backbone, ExecutionPlan, count_cost, decode_array, encode_array, forward_task
from .data import Dataset, Split
from .gumbel import TemperatureSchedule
from .metrics import MetricValues, delta_overall, delta_task, task_metrics
from .optim import SGD, Adam, step_lr
from .policy import (PolicyDistribution, advance_curriculum, default_cadence, expected_plan,
                     relaxed_policy_weights, sample_plan, task_weights)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    warm_up_epochs: int = 10
    e1: int = 1
    e2: int = 1
    max_epochs: int = 40
    retrain_epochs: int = 20
    batch_size: int = 64
    lr_network: float = 0.01
    lr_policy: float = 0.01
    lr_gates: float = 0.02
    lr_period: int = 1000
    momentum: float = 0.9
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    tau_initial: float = 5.0
    tau_decay: float = 0.965
    tau_trigger: str = "on_metric_met"
    tau_floor: float = 0.5
    retrain_tau: float = 1.0
    curriculum_cadence: int | None = None
    hard_paths_in_network_phase: bool = False
    eval_gate: str = "threshold"
    num_sampled_plans: int = 8
    retrain_from: str = "fresh"
    ratio_threshold: float = 1.25
    seed: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        counts = ("warm_up_epochs", "e1", "e2", "max_epochs", "retrain_epochs", "batch_size",
                  "lr_period", "num_sampled_plans")
        for name in counts:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.max_epochs < self.warm_up_epochs:
            raise ValueError("max_epochs must be >= warm_up_epochs")
        for name in ("lr_network", "lr_policy", "lr_gates", "tau_initial", "tau_floor", "retrain_tau"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.retrain_from not in ("fresh", "trained"):
            raise ValueError("retrain_from must be 'fresh' or 'trained'")
        if self.eval_gate not in ("threshold", "sample"):
            raise ValueError("eval_gate must be 'threshold' or 'sample'")

    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.tau_initial, self.tau_decay, self.tau_trigger, self.tau_floor)


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _check_finite(loss: T.Tensor, where: str) -> None:
    if not np.isfinite(loss.data):
        raise DivergenceError(f"non-finite total loss ({loss.item()}) during {where}")


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


# -- evaluation --------------------------------------------------------------


@dataclass
class EvalResult:
    outputs: list[np.ndarray]
    metrics: dict[str, MetricValues]
    gate_rates: np.ndarray  # eval-mode execute fraction per block (1 where ungated)
    gate_probs: dict[int, np.ndarray] = field(default_factory=dict)  # per-instance execute prob


def evaluate(backbone: Backbone, plan: ExecutionPlan, split: Split, data: Dataset,
             task_ids: Sequence[int] | None = None, use_gates: bool = True,
             eval_gate: str = "threshold", rng=None, ratio_threshold: float = 1.25) -> EvalResult:
    spec = backbone.spec
    task_ids = list(range(spec.K)) if task_ids is None else list(task_ids)
    x = T.Tensor(split.x)
    outputs, metrics = [], {}
    fired = np.zeros(spec.L)
    seen = np.zeros(spec.L)
    probs: dict[int, list] = {}
    for k, tid in enumerate(task_ids):
        out, traces = forward_task(backbone, plan.column(k), k, x, mode="eval", rng=rng,
                                   use_gates=use_gates, eval_gate=eval_gate)
        outputs.append(out.data)
        task = data.tasks[tid]
        metrics[task.name] = task_metrics(out.data, split.y[tid], task.kind, ratio_threshold)
        for l, tr in enumerate(traces):
            if tr.executed and use_gates and spec.gate_enable_mask[l]:
                fired[l] += tr.bits.mean()
                seen[l] += 1
                probs.setdefault(l, []).append(tr.w_soft.data)
    rates = np.where(seen > 0, fired / np.maximum(seen, 1), 1.0)
    return EvalResult(outputs, metrics, rates, {l: np.concatenate(p) for l, p in probs.items()})


def delta_vs(metrics: dict[str, MetricValues], reference: dict[str, MetricValues]) -> float:
    return delta_overall([delta_task(metrics[name], reference[name]) for name in metrics])


# -- policy training ------------------------------------------------------------


class Trainer:
    """Warm-up with hard sharing, then alternate network-weight and policy epochs.

    One call to :meth:`run_epoch` advances exactly one epoch, so state can be
    checkpointed at any epoch boundary.
    """

    def __init__(self, config: TrainConfig, data: Dataset, backbone: Backbone,
                 policy: PolicyDistribution, weights: Lo.LossWeights,
                 task_ids: Sequence[int] | None = None):
        self.config = config
        self.data = data
        self.backbone = backbone
        self.policy = policy
        self.weights = weights
        self.task_ids = list(range(backbone.spec.K)) if task_ids is None else list(task_ids)
        self.rng = np.random.default_rng([config.seed, 1])
        self.sched = config.schedule()
        self.net_opt = SGD({n: backbone.params[n] for n in backbone.names("network")},
                           config.lr_network, config.momentum)
        self.pol_opt = Adam({"logits": policy.logits}, config.lr_policy, config.adam_betas, config.adam_eps)
        policy_epochs = config.max_epochs - config.warm_up_epochs
        self.cadence = config.curriculum_cadence or default_cadence(policy_epochs, policy.max_frontier)
        self.epoch = 0
        self.baseline: dict | None = None
        self.history: list[dict] = []

    def phase(self, epoch: int) -> str:
        c = self.config
        if epoch < c.warm_up_epochs:
            return "warmup"
        return "network" if (epoch - c.warm_up_epochs) % (c.e1 + c.e2) < c.e1 else "policy"

    @property
    def done(self) -> bool:
        return self.epoch >= self.config.max_epochs

    def _columns(self, phase: str) -> list[list]:
        L, K = self.policy.L, self.policy.K
        if phase == "warmup":
            return [[1] * L for _ in range(K)]
        if phase == "network" and self.config.hard_paths_in_network_phase:
            plan = sample_plan(self.policy, self.rng)
            return [plan.column(k) for k in range(K)]
        w = relaxed_policy_weights(self.policy, self.sched.tau, self.rng, requires_grad=(phase == "policy"))
        return [task_weights(w, self.policy, k) for k in range(K)]

    def run_epoch(self) -> dict:
        c, epoch = self.config, self.epoch
        phase = self.phase(epoch)
        self.net_opt.lr = step_lr(epoch, c.lr_network, c.lr_period)
        self.pol_opt.lr = step_lr(epoch, c.lr_policy, c.lr_period)
        if phase != "warmup":
            advance_curriculum(self.policy, epoch - c.warm_up_epochs, self.cadence)
        train = self.data.splits["train"]
        sums: dict[str, float] = {}
        nb = 0
        for idx in _batches(len(train), c.batch_size, self.rng):
            x = T.Tensor(train.x[idx])
            cols = self._columns(phase)
            task_l = []
            for k, tid in enumerate(self.task_ids):
                out, _ = forward_task(self.backbone, cols[k], k, x, use_gates=False)
                task_l.append(Lo.task_loss(out, train.y[tid][idx], self.data.tasks[tid].kind))
            aux = {}
            if phase == "policy":
                alpha = self.policy.alpha_tensor()
                aux["sparsity"] = Lo.sparsity_loss(alpha, self.policy.learnable_mask())
                aux["sharing"] = Lo.sharing_loss(alpha, self.weights.ordered_pairs)
            total = Lo.total_loss(task_l, aux, self.weights, phase)
            _check_finite(total, f"{phase} epoch {epoch}")
            self.backbone.zero_grad()
            self.policy.logits.zero_grad()
            total.backward()
            if phase == "policy":
                self.pol_opt.step()
                self.policy.clamp()
            else:
                self.net_opt.step()
            for k, lk in enumerate(task_l):
                sums[f"loss_task{k}"] = sums.get(f"loss_task{k}", 0.0) + lk.item()
            for name, v in aux.items():
                sums[f"loss_{name}"] = sums.get(f"loss_{name}", 0.0) + v.item()
            sums["loss_total"] = sums.get("loss_total", 0.0) + total.item()
            nb += 1
        row = {"epoch": epoch, "phase": phase, "tau": self.sched.tau, "lr": self.net_opt.lr,
               "frontier": self.policy.frontier}
        row.update({k: v / nb for k, v in sums.items()})
        row.update(self._end_of_epoch(phase))
        self.history.append(row)
        self.epoch += 1
        return row

    def _end_of_epoch(self, phase: str) -> dict:
        c = self.config
        val = self.data.splits["val"]
        if phase == "warmup":
            if self.epoch == c.warm_up_epochs - 1:
                plan = ExecutionPlan.all_ones(self.policy.L, self.policy.K)
                res = evaluate(self.backbone, plan, val, self.data, self.task_ids, use_gates=False,
                               ratio_threshold=c.ratio_threshold)
                self.baseline = res.metrics
            return {}
        res = evaluate(self.backbone, expected_plan(self.policy), val, self.data, self.task_ids,
                       use_gates=False, ratio_threshold=c.ratio_threshold)
        d = delta_vs(res.metrics, self.baseline)
        fired = True if c.tau_trigger == "every_epoch" else d >= 0.0
        self.sched.step(fired)
        return {"val_delta_vs_shared": d}

    def fit(self, log_fn: Callable[[dict], None] | None = None) -> tuple[PolicyDistribution, Backbone]:
        while not self.done:
            row = self.run_epoch()
            if log_fn:
                log_fn(row)
        return self.policy, self.backbone

    # -- checkpointing ---------------------------------------------------------
    def state_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "rng": _rng_state(self.rng),
            "tau": self.sched.tau,
            "net_opt": self.net_opt.state_dict(),
            "pol_opt": self.pol_opt.state_dict(),
            "backbone": self.backbone.to_dict(),
            "policy": {**self.policy.state_dict(),
                       "logits": encode_array(self.policy.logits.data)},
            "baseline": _encode_metrics(self.baseline),
            "history": self.history,
        }

    def load_state_dict(self, state: dict) -> None:
        self.epoch = state["epoch"]
        self.rng.bit_generator.state = state["rng"]
        self.sched.tau = state["tau"]
        self.net_opt.load_state_dict(state["net_opt"])
        self.pol_opt.load_state_dict(state["pol_opt"])
        bb, _ = Backbone.from_dict(state["backbone"])
        self.backbone.load_snapshot(bb.snapshot())
        self.policy.logits.data = decode_array(state["policy"]["logits"])
        self.policy.frontier = state["policy"]["frontier"]
        self.baseline = _decode_metrics(state["baseline"])
        self.history = list(state["history"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.state_dict()))

    def load(self, path) -> None:
        self.load_state_dict(json.loads(Path(path).read_text()))


def _encode_metrics(m):
    if m is None:
        return None
    return {task: [[s.name, s.lower_better, v] for s, v in vals] for task, vals in m.items()}


def _decode_metrics(m):
    from .metrics import MetricSpec
    if m is None:
        return None
    return {task: [(MetricSpec(n, lb), v) for n, lb, v in vals] for task, vals in m.items()}


def train(config: TrainConfig, data: Dataset, backbone: Backbone, policy: PolicyDistribution,
          weights: Lo.LossWeights, log_fn=None) -> tuple[PolicyDistribution, Backbone]:
    return Trainer(config, data, backbone, policy, weights).fit(log_fn)


# -- retraining with a fixed plan ----------------------------------------------


@dataclass
class RetrainResult:
    backbone: Backbone
    plan: ExecutionPlan
    history: list[dict] = field(default_factory=list)
    train_rates: np.ndarray | None = None  # hard execute rate per block over the final epoch


class Retrainer:
    """Fixed-plan training of weights and instance gates toward a target execute rate."""

    def __init__(self, config: TrainConfig, data: Dataset, backbone: Backbone, plan: ExecutionPlan,
                 weights: Lo.LossWeights, use_gates: bool = True, seed=None,
                 task_ids: Sequence[int] | None = None):
        self.config = config
        self.data = data
        self.backbone = backbone
        self.plan = plan
        self.weights = weights
        self.use_gates = use_gates
        self.task_ids = list(range(backbone.spec.K)) if task_ids is None else list(task_ids)
        if plan.u.shape != (backbone.spec.L, len(self.task_ids)):
            raise ValueError("plan does not match backbone")
        plan.check(backbone.spec)
        self.rng = np.random.default_rng([config.seed, 2] if seed is None else seed)
        self.net_opt = SGD({n: backbone.params[n] for n in backbone.names("network")},
                           config.lr_network, config.momentum)
        self.gate_opt = SGD({n: backbone.params[n] for n in backbone.names("gates")},
                            config.lr_gates, config.momentum)
        self.epoch = 0
        self.history: list[dict] = []
        self.train_rates: np.ndarray | None = None

    def run_epoch(self) -> dict:
        c, spec = self.config, self.backbone.spec
        self.net_opt.lr = step_lr(self.epoch, c.lr_network, c.lr_period)
        self.gate_opt.lr = step_lr(self.epoch, c.lr_gates, c.lr_period)
        train = self.data.splits["train"]
        gated = [l for l in range(spec.L) if self.use_gates and spec.gate_enable_mask[l]]
        rate_sum = np.zeros(spec.L)
        rate_cnt = np.zeros(spec.L)
        sums: dict[str, float] = {}
        nb = 0
        for idx in _batches(len(train), c.batch_size, self.rng):
            x = T.Tensor(train.x[idx])
            task_l = []
            soft: dict[int, list] = {l: [] for l in gated}
            for k, tid in enumerate(self.task_ids):
                out, traces = forward_task(self.backbone, self.plan.column(k), k, x, c.retrain_tau,
                                           self.rng, "train", self.use_gates)
                task_l.append(Lo.task_loss(out, train.y[tid][idx], self.data.tasks[tid].kind))
                for l in gated:
                    tr = traces[l]
                    if tr.executed:
                        soft[l].append(T.mean(tr.w_soft))
                        rate_sum[l] += tr.bits.mean()
                        rate_cnt[l] += 1
            betas = []
            for l in gated:
                if soft[l]:
                    b = soft[l][0]
                    for extra in soft[l][1:]:
                        b = T.add(b, extra)
                    betas.append(T.mul(b, 1.0 / len(soft[l])))
            aux = {"instance": Lo.instance_loss(T.stack(betas), self.weights.target_rate)} if betas else {}
            total = Lo.total_loss(task_l, aux, self.weights, "retrain")
            _check_finite(total, f"retrain epoch {self.epoch}")
            self.backbone.zero_grad()
            total.backward()
            self.net_opt.step()
            self.gate_opt.step()
            for k, lk in enumerate(task_l):
                sums[f"loss_task{k}"] = sums.get(f"loss_task{k}", 0.0) + lk.item()
            if aux:
                sums["loss_instance"] = sums.get("loss_instance", 0.0) + aux["instance"].item()
            sums["loss_total"] = sums.get("loss_total", 0.0) + total.item()
            nb += 1
        self.train_rates = np.where(rate_cnt > 0, rate_sum / np.maximum(rate_cnt, 1), np.nan)
        row = {"epoch": self.epoch, "phase": "retrain", "tau": c.retrain_tau, "lr": self.net_opt.lr}
        row.update({k: v / nb for k, v in sums.items()})
        row.update({f"rate_block{l}": float(self.train_rates[l]) for l in gated})
        self.history.append(row)
        self.epoch += 1
        return row

    def fit(self, log_fn=None) -> RetrainResult:
        while self.epoch < self.config.retrain_epochs:
            row = self.run_epoch()
            if log_fn:
                log_fn(row)
        return RetrainResult(self.backbone, self.plan, self.history, self.train_rates)


def retrain(config: TrainConfig, data: Dataset, backbone: Backbone, plan: ExecutionPlan,
            weights: Lo.LossWeights, use_gates: bool = True, seed=None, log_fn=None) -> RetrainResult:
    return Retrainer(config, data, backbone, plan, weights, use_gates, seed).fit(log_fn)


# -- sampling plans and keeping the best --------------------------------------


@dataclass
class Candidate:
    index: int
    plan: ExecutionPlan
    delta: float
    flops: float
    result: RetrainResult | None = None


def plan_seed(base_seed: int, plan: ExecutionPlan, salt: int = 0) -> list[int]:
    """Retrain seed derived from the plan itself, so duplicated plans retrain identically."""
    return [base_seed, 10, salt, *plan.u.ravel().tolist()]


def sample_plans(config: TrainConfig, policy: PolicyDistribution) -> list[ExecutionPlan]:
    rng = np.random.default_rng([config.seed, 3])
    return [sample_plan(policy, rng) for _ in range(config.num_sampled_plans)]


def select_best(config: TrainConfig, data: Dataset, policy: PolicyDistribution,
                retrain_fn: Callable[[int, ExecutionPlan], RetrainResult],
                evaluate_fn: Callable[[RetrainResult], tuple[float, np.ndarray | None]],
                plans: Sequence[ExecutionPlan] | None = None,
                spec=None) -> tuple[Candidate, list[Candidate]]:
    """Sample plans, retrain each, keep the best validation delta (ties: fewer FLOPs).

    ``retrain_fn(i, plan)`` trains a model for plan ``i``; ``evaluate_fn``
    returns its validation delta and eval-mode gate rates. Identical plans
    are retrained only once.
    """
    if plans is None:
        plans = sample_plans(config, policy)
    cache: dict[tuple, tuple] = {}
    cands = []
    for i, plan in enumerate(plans):
        if plan.key() not in cache:
            res = retrain_fn(i, plan)
            cache[plan.key()] = (res, *evaluate_fn(res))
        res, delta, rates = cache[plan.key()]
        cost_spec = spec if spec is not None else res.backbone.spec
        _, flops = count_cost(cost_spec, plan, rates)
        cands.append(Candidate(i, plan, float(delta), flops, res))
    best = min(cands, key=lambda c: (-c.delta, c.flops, c.index))
    return best, cands
