"""Task-specific execution policy: per-block, per-task Bernoulli logits."""
from __future__ import annotations

import csv
import io
import json

import numpy as np

from . import gumbel
from . import tensor as T
from .backbone import ExecutionPlan
from .tensor import Tensor

LOGIT_CLAMP = 30.0


class PolicyDistribution:
    """Logits ``[L, K, 2]`` with a curriculum frontier.

    Blocks in ``always_on`` and blocks not yet reached by the frontier are
    pinned: they always execute and their logits receive no gradient. The
    frontier grows from the last block towards the first.
    """

    def __init__(self, L: int, K: int, always_on=None, logits=None, frontier: int = 0):
        self.L, self.K = L, K
        self.always_on = np.zeros(L, dtype=bool) if always_on is None else np.asarray(always_on, dtype=bool)
        if self.always_on.shape != (L,):
            raise ValueError("always_on mask must have one entry per block")
        data = np.zeros((L, K, 2)) if logits is None else np.asarray(logits, dtype=np.float64)
        if data.shape != (L, K, 2):
            raise T.ShapeError("PolicyDistribution", data.shape, (L, K, 2))
        self.logits = Tensor(data.copy(), requires_grad=True)
        self.frontier = 0
        self.set_frontier(frontier)

    @property
    def max_frontier(self) -> int:
        return int((~self.always_on).sum())

    def learnable_blocks(self) -> np.ndarray:
        """Boolean ``[L]`` mask of blocks whose policy is currently trained."""
        candidates = np.flatnonzero(~self.always_on)[::-1][: self.frontier]
        mask = np.zeros(self.L, dtype=bool)
        mask[candidates] = True
        return mask

    def pinned(self) -> np.ndarray:
        return ~self.learnable_blocks()

    def set_frontier(self, frontier: int) -> None:
        frontier = int(min(max(frontier, 0), self.max_frontier))
        before = self.learnable_blocks()
        self.frontier = frontier
        entering = self.learnable_blocks() & ~before
        if entering.any():
            # blocks entering the curriculum start unbiased (alpha = 0.5)
            data = self.logits.data.copy()
            data[entering] = 0.0
            self.logits.data = data

    def clamp(self) -> None:
        """Clip each logit pair's gap to +-LOGIT_CLAMP around its mean.

        Only the gap sets alpha, and a gap of 30 keeps alpha strictly inside
        (0, 1) in float64 (clipping each logit alone would allow a gap of 60).
        """
        z = self.logits.data
        mid = z.mean(axis=-1, keepdims=True)
        half = np.clip(z - mid, -LOGIT_CLAMP / 2, LOGIT_CLAMP / 2)
        self.logits.data = mid + half

    def alpha(self) -> np.ndarray:
        """Execute probabilities ``[L, K]``; pinned blocks report exactly 1."""
        a = T.softmax(self.logits.detach(), axis=-1).data[..., 1]
        return np.where(self.pinned()[:, None], 1.0, a)

    def alpha_tensor(self) -> Tensor:
        a = T.softmax(self.logits, axis=-1)[:, :, 1]
        mask = np.broadcast_to(self.pinned()[:, None], (self.L, self.K))
        return T.where(mask, Tensor(1.0), a)

    def learnable_mask(self) -> np.ndarray:
        return np.broadcast_to(self.learnable_blocks()[:, None], (self.L, self.K)).copy()

    def state_dict(self) -> dict:
        return {"L": self.L, "K": self.K, "always_on": self.always_on.tolist(),
                "logits": self.logits.data.tolist(), "frontier": self.frontier}

    @classmethod
    def from_state(cls, state: dict) -> PolicyDistribution:
        dist = cls(state["L"], state["K"], state["always_on"], frontier=0)
        dist.logits.data = np.asarray(state["logits"], dtype=np.float64)
        dist.frontier = int(state["frontier"])
        return dist

    def clone(self) -> PolicyDistribution:
        return PolicyDistribution.from_state(json.loads(json.dumps(self.state_dict())))


def relaxed_policy_weights(dist: PolicyDistribution, tau: float, rng, requires_grad: bool = True) -> Tensor:
    """One relaxed Gumbel-Softmax sample per (block, task); pinned entries are exactly [0, 1]."""
    g = gumbel.sample_gumbel(rng, (dist.L, dist.K, 2)) if rng is not None else np.zeros((dist.L, dist.K, 2))
    logits = dist.logits if requires_grad else dist.logits.detach()
    soft = gumbel.relaxed_sample(gumbel.BernoulliLogits(logits), g, tau)
    mask = np.broadcast_to(dist.pinned()[:, None, None], soft.shape)
    return T.where(mask, Tensor(np.broadcast_to([0.0, 1.0], soft.shape).copy()), soft)


def task_weights(weights: Tensor, dist: PolicyDistribution, k: int) -> list:
    """Per-block plan values for task ``k``: ints for pinned blocks, scalar tensors otherwise."""
    pinned = dist.pinned()
    return [1 if pinned[l] else weights[l, k, 1] for l in range(dist.L)]


def sample_plan(dist: PolicyDistribution, rng) -> ExecutionPlan:
    g = gumbel.sample_gumbel(rng, (dist.L, dist.K, 2))
    bits = gumbel.hard_sample(gumbel.BernoulliLogits(dist.logits.detach()), g)
    bits[dist.pinned()] = 1
    return ExecutionPlan(bits)


def expected_plan(dist: PolicyDistribution) -> ExecutionPlan:
    """Most likely plan, ``u = [alpha >= 0.5]``."""
    return ExecutionPlan((dist.alpha() >= 0.5).astype(np.int64))


def curriculum_frontier(epoch: int, cadence: int, max_frontier: int) -> int:
    return int(min(max(epoch, 0) // max(cadence, 1), max_frontier))


def advance_curriculum(dist: PolicyDistribution, epoch: int, cadence: int) -> int:
    dist.set_frontier(curriculum_frontier(epoch, cadence, dist.max_frontier))
    return dist.frontier


def default_cadence(policy_epochs: int, learnable_blocks: int) -> int:
    # one spare interval so the full frontier is trained before the run ends
    return max(1, policy_epochs // (learnable_blocks + 1))


def export_policy(dist: PolicyDistribution, plans=()) -> dict:
    return {"alpha": dist.alpha().tolist(), "plans": [p.u.tolist() for p in plans]}


def policy_csv(matrix, task_names=None) -> str:
    """Render an ``[L, K]`` matrix with one row per block and one column per task."""
    matrix = np.asarray(matrix)
    names = task_names or [f"task{k}" for k in range(matrix.shape[1])]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["block", *names])
    for l, row in enumerate(matrix):
        w.writerow([l, *[repr(float(v)) for v in row]])
    return buf.getvalue()
