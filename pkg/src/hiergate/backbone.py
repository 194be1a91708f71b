"""Residual backbone with per-block instance gates and per-task heads.

Block output follows the task/instance fusion rule::

    Y = residual(X)                  if u == 0 or w == 0
    Y = relu(residual(X) + Z)        if u == 1 and w == 1

where ``u`` comes from the task's execution plan and ``w`` from the
block's gating unit. During policy learning ``u`` may be a relaxed scalar
tensor, in which case ``Y = relu(residual(X) + u * Z)``.
"""
from __future__ import annotations

import base64
import copy
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import gumbel
from . import tensor as T
from .tensor import Tensor


@dataclass
class TaskHead:
    name: str
    kind: str  # classification | binary | regression
    n_out: int

    def __post_init__(self):
        if self.kind not in ("classification", "binary", "regression"):
            raise ValueError(f"unknown task kind {self.kind!r}")
        if self.n_out < 1:
            raise ValueError("task head needs at least one output")


@dataclass
class BackboneSpec:
    in_dim: int
    widths: list[int]
    tasks: list[TaskHead]
    gate_enable_mask: list[bool] | None = None
    always_on_mask: list[bool] | None = None
    gate_hidden: int | None = None
    gate_open_bias: float = 1.0

    def __post_init__(self):
        self.tasks = [t if isinstance(t, TaskHead) else TaskHead(**t) for t in self.tasks]
        self.widths = [int(w) for w in self.widths]
        L = len(self.widths)
        if L < 1:
            raise ValueError("backbone needs at least one block")
        if len(self.tasks) < 1:
            raise ValueError("backbone needs at least one task head")
        if self.in_dim < 1 or min(self.widths) < 1:
            raise ValueError("dimensions must be positive")
        if self.gate_enable_mask is None:
            self.gate_enable_mask = [False] * L
        if self.always_on_mask is None:
            self.always_on_mask = [False] * L
        self.gate_enable_mask = [bool(b) for b in self.gate_enable_mask]
        self.always_on_mask = [bool(b) for b in self.always_on_mask]
        if len(self.gate_enable_mask) != L or len(self.always_on_mask) != L:
            raise ValueError(f"masks must have one entry per block ({L})")

    @property
    def L(self) -> int:
        return len(self.widths)

    @property
    def K(self) -> int:
        return len(self.tasks)

    def block_dims(self, l: int) -> tuple[int, int]:
        return (self.in_dim if l == 0 else self.widths[l - 1]), self.widths[l]

    def gate_width(self, l: int) -> int:
        if self.gate_hidden:
            return self.gate_hidden
        return max(1, self.block_dims(l)[0] // 4)

    def ungated(self) -> BackboneSpec:
        out = copy.deepcopy(self)
        out.gate_enable_mask = [False] * self.L
        return out

    def single_task(self, k: int) -> BackboneSpec:
        out = copy.deepcopy(self)
        out.tasks = [copy.deepcopy(self.tasks[k])]
        out.gate_enable_mask = [False] * self.L
        return out

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ResidualBlock:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    P: Tensor | None = None

    def residual(self, X: Tensor) -> Tensor:
        return X if self.P is None else T.matmul(X, self.P)

    def transform(self, X: Tensor) -> Tensor:
        return T.linear(T.relu(T.linear(X, self.W1, self.b1)), self.W2, self.b2)


@dataclass
class GatingUnit:
    """Relevance estimator ``d -> d/4 -> 2`` producing skip/execute logits."""

    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def logits(self, X: Tensor) -> Tensor:
        # rows of X are already per-instance feature vectors, so pooling is the identity here
        return T.linear(T.relu(T.linear(X, self.W1, self.b1)), self.W2, self.b2)


@dataclass
class ExecutionPlan:
    """Binary ``u[l, k]``: does task ``k`` execute block ``l``."""

    u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.int64)
        if self.u.ndim != 2 or not np.all((self.u == 0) | (self.u == 1)):
            raise ValueError("plan must be a binary L x K matrix")

    @classmethod
    def all_ones(cls, L: int, K: int) -> ExecutionPlan:
        return cls(np.ones((L, K), dtype=np.int64))

    def column(self, k: int) -> list[int]:
        return [int(v) for v in self.u[:, k]]

    def check(self, spec: BackboneSpec) -> ExecutionPlan:
        if self.u.shape[0] != spec.L:
            raise ValueError(f"plan has {self.u.shape[0]} rows for {spec.L} blocks")
        off = [l for l in range(spec.L) if spec.always_on_mask[l] and not self.u[l].all()]
        if off:
            raise ValueError(f"always-on block(s) {off} are disabled in the plan")
        return self

    def key(self) -> tuple:
        return tuple(map(tuple, self.u.tolist()))


@dataclass
class BlockTrace:
    executed: bool
    bits: np.ndarray  # hard per-instance execute decision
    w_soft: Tensor | None = None  # relaxed execute probability, differentiable in train mode


class Backbone:
    """Parameter container; tensors are addressed by stable string names."""

    def __init__(self, spec: BackboneSpec, params: dict[str, Tensor]):
        self.spec = spec
        self.params = params

    @classmethod
    def init(cls, spec: BackboneSpec, rng: np.random.Generator) -> Backbone:
        params: dict[str, Tensor] = {}

        def dense(name, fan_in, fan_out, scale=1.0, bias=0.0):
            W = rng.normal(0.0, scale * np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
            params[f"{name}.W"] = Tensor(W, requires_grad=True)
            params[f"{name}.b"] = Tensor(np.full(fan_out, bias, dtype=np.float64), requires_grad=True)

        for l in range(spec.L):
            d_in, d_out = spec.block_dims(l)
            dense(f"block{l}.fc1", d_in, d_out)
            dense(f"block{l}.fc2", d_out, d_out, scale=0.5)
            if d_in != d_out:
                P = rng.normal(0.0, np.sqrt(1.0 / d_in), size=(d_in, d_out))
                params[f"block{l}.proj"] = Tensor(P, requires_grad=True)
        for l in range(spec.L):
            if spec.gate_enable_mask[l]:
                d_in, _ = spec.block_dims(l)
                h = spec.gate_width(l)
                dense(f"gate{l}.fc1", d_in, h)
                dense(f"gate{l}.fc2", h, 2, scale=0.5)
                params[f"gate{l}.fc2.b"] = Tensor([0.0, spec.gate_open_bias], requires_grad=True)
        for k, head in enumerate(spec.tasks):
            dense(f"head{k}", spec.widths[-1], head.n_out, scale=0.5)
        return cls(spec, params)

    # -- views -------------------------------------------------------------
    def block(self, l: int) -> ResidualBlock:
        p = self.params
        return ResidualBlock(p[f"block{l}.fc1.W"], p[f"block{l}.fc1.b"],
                             p[f"block{l}.fc2.W"], p[f"block{l}.fc2.b"],
                             p.get(f"block{l}.proj"))

    def gate(self, l: int) -> GatingUnit | None:
        p = self.params
        if f"gate{l}.fc1.W" not in p:
            return None
        return GatingUnit(p[f"gate{l}.fc1.W"], p[f"gate{l}.fc1.b"],
                          p[f"gate{l}.fc2.W"], p[f"gate{l}.fc2.b"])

    def head(self, k: int) -> tuple[Tensor, Tensor]:
        return self.params[f"head{k}.W"], self.params[f"head{k}.b"]

    def names(self, group: str = "all") -> list[str]:
        if group == "all":
            return list(self.params)
        if group == "gates":
            return [n for n in self.params if n.startswith("gate")]
        if group == "network":
            return [n for n in self.params if not n.startswith("gate")]
        if group.startswith("block"):
            return [n for n in self.params if n.split(".")[0] == group]
        raise ValueError(f"unknown parameter group {group!r}")

    def parameters(self, group: str = "all") -> list[Tensor]:
        return [self.params[n] for n in self.names(group)]

    def num_params(self, group: str = "all") -> int:
        return int(sum(p.size for p in self.parameters(group)))

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clone(self) -> Backbone:
        params = {n: Tensor(p.data.copy(), requires_grad=p.requires_grad) for n, p in self.params.items()}
        return Backbone(copy.deepcopy(self.spec), params)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self.params.items()}

    def load_snapshot(self, snap: dict[str, np.ndarray]) -> None:
        for n, arr in snap.items():
            self.params[n].data = np.array(arr, dtype=np.float64)

    # -- serialisation -------------------------------------------------------
    def to_dict(self, plan: ExecutionPlan | None = None) -> dict:
        doc = {
            "spec": self.spec.to_dict(),
            "params": {n: encode_array(p.data) for n, p in self.params.items()},
        }
        if plan is not None:
            doc["plan"] = plan.u.tolist()
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> tuple[Backbone, ExecutionPlan | None]:
        spec = BackboneSpec(**doc["spec"])
        params = {n: Tensor(decode_array(v), requires_grad=True) for n, v in doc["params"].items()}
        plan = ExecutionPlan(np.asarray(doc["plan"])) if doc.get("plan") is not None else None
        return cls(spec, params), plan


def encode_array(a: np.ndarray) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "f64le": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(doc: dict) -> np.ndarray:
    raw = base64.b64decode(doc["f64le"])
    return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).astype(np.float64)


def _gate_decision(gate: GatingUnit, X: Tensor, tau: float, rng, mode: str, eval_gate: str):
    logits = gate.logits(X)
    n = X.shape[0]
    if mode == "train":
        g = gumbel.sample_gumbel(rng, (n, 2)) if rng is not None else np.zeros((n, 2))
        soft = gumbel.relaxed_sample(gumbel.BernoulliLogits(logits), g, tau)
        bits = gumbel.hard_sample(gumbel.BernoulliLogits(logits.detach()), g)
        w = gumbel.straight_through(bits, soft)[:, 1]
        # noise-free execute probability: its batch mean is unbiased for the hard rate
        return w, bits, T.softmax(logits, axis=-1)[:, 1]
    if mode == "eval":
        alpha = T.softmax(logits.detach(), axis=-1).data[:, 1]
        if eval_gate == "threshold":
            bits = (alpha > 0.5).astype(np.int64)
        elif eval_gate == "sample":
            if rng is None:
                raise ValueError("stochastic evaluation gates need an rng")
            bits = (rng.random(n) < alpha).astype(np.int64)
        else:
            raise ValueError(f"unknown eval gate mode {eval_gate!r}")
        return Tensor(bits.astype(np.float64)), bits, Tensor(alpha)
    raise ValueError(f"unknown mode {mode!r}")


def block_forward(block: ResidualBlock, gate: GatingUnit | None, X: Tensor, u,
                  tau: float = 1.0, rng: np.random.Generator | None = None,
                  mode: str = "train", force_w=None, eval_gate: str = "threshold"):
    """Apply one block under plan value ``u`` and (optionally) an instance gate.

    ``u`` is 0/1 for a fixed plan or a scalar tensor for relaxed policy
    training. ``rng=None`` means zero Gumbel noise. Returns ``(Y, trace)``.
    """
    n = X.shape[0]
    if not isinstance(u, Tensor) and u == 0:
        return block.residual(X), BlockTrace(False, np.zeros(n, dtype=np.int64))
    res = block.residual(X)
    Z = block.transform(X)
    if Z.shape != res.shape:
        raise T.ShapeError("block_forward", res.shape, Z.shape)
    on = T.relu(T.add(res, T.mul(u, Z) if isinstance(u, Tensor) else Z))
    if force_w is not None:
        bits = np.asarray(force_w, dtype=np.int64).reshape(n)
        return T.gate_select(Tensor(bits.astype(np.float64)), on, res), BlockTrace(True, bits)
    if gate is None:
        return on, BlockTrace(True, np.ones(n, dtype=np.int64))
    w, bits, w_soft = _gate_decision(gate, X, tau, rng, mode, eval_gate)
    return T.gate_select(w, on, res), BlockTrace(True, bits, w_soft)


def forward_task(backbone: Backbone, u_col: Sequence, task: int, x, tau: float = 1.0,
                 rng: np.random.Generator | None = None, mode: str = "train",
                 use_gates: bool = True, force_w: Sequence | None = None,
                 eval_gate: str = "threshold"):
    """Run the backbone along task ``task``'s path and its head.

    Returns ``(head output, per-block traces)``.
    """
    spec = backbone.spec
    if len(u_col) != spec.L:
        raise ValueError(f"plan column has {len(u_col)} entries for {spec.L} blocks")
    h = T.as_tensor(x)
    if h.ndim != 2 or h.shape[1] != spec.in_dim:
        raise T.ShapeError("forward_task", h.shape, (None, spec.in_dim))
    traces = []
    for l in range(spec.L):
        gate = None
        if use_gates and spec.gate_enable_mask[l]:
            gate = backbone.gate(l)
            if gate is None:
                raise ValueError(f"block {l} is gated but has no gating unit")
        fw = None if force_w is None else force_w[l]
        h, tr = block_forward(backbone.block(l), gate, h, u_col[l], tau, rng, mode, fw, eval_gate)
        traces.append(tr)
    W, b = backbone.head(task)
    return T.linear(h, W, b), traces


# -- cost accounting ----------------------------------------------------------


def _lin(i: int, o: int) -> int:
    # multiply-accumulate counts as 2 flops, plus the bias add
    return 2 * i * o + o


@dataclass
class BlockCost:
    transform: int
    fusion: int
    shortcut: int
    gate: int
    params: int = 0
    gate_params: int = 0


def block_costs(spec: BackboneSpec) -> list[BlockCost]:
    out = []
    for l in range(spec.L):
        i, o = spec.block_dims(l)
        transform = _lin(i, o) + o + _lin(o, o)
        shortcut = 2 * i * o if i != o else 0
        gate = gate_params = 0
        if spec.gate_enable_mask[l]:
            h = spec.gate_width(l)
            gate = _lin(i, h) + h + _lin(h, 2)
            gate_params = i * h + h + h * 2 + 2
        params = i * o + o + o * o + o + (i * o if i != o else 0)
        out.append(BlockCost(transform, 2 * o, shortcut, gate, params, gate_params))
    return out


def _distinct_prefixes(u: np.ndarray, l: int, tasks) -> int:
    return len({tuple(u[:l, k]) for k in tasks})


def count_cost(spec: BackboneSpec, plan: ExecutionPlan, gate_rates=None) -> tuple[int, float]:
    """Parameter count and expected per-instance FLOPs for all K task outputs.

    Tasks whose paths agree on every earlier block see the same block
    input, so a block is evaluated once per distinct input prefix among the
    tasks executing it. Gated blocks scale their transform and fusion cost
    by the execute rate; the gate itself always runs.
    """
    u = plan.u
    if u.shape != (spec.L, spec.K):
        raise ValueError(f"plan shape {u.shape} does not match ({spec.L}, {spec.K})")
    rates = np.ones(spec.L) if gate_rates is None else np.asarray(gate_rates, dtype=np.float64)
    if rates.shape != (spec.L,) or np.any((rates < 0) | (rates > 1)):
        raise ValueError("gate rates must be L values in [0, 1]")
    costs = block_costs(spec)
    params = sum(c.params + c.gate_params for c in costs)
    flops = 0.0
    for l, c in enumerate(costs):
        flops += _distinct_prefixes(u, l, range(spec.K)) * c.shortcut
        evals = _distinct_prefixes(u, l, [k for k in range(spec.K) if u[l, k] == 1])
        if spec.gate_enable_mask[l]:
            flops += evals * (c.gate + rates[l] * (c.transform + c.fusion))
        else:
            flops += evals * (c.transform + c.fusion)
    w = spec.widths[-1]
    for head in spec.tasks:
        params += w * head.n_out + head.n_out
        flops += _lin(w, head.n_out)
    return int(params), float(flops)
