"""Task losses and the policy / gating regularisers."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

TASK_KINDS = ("classification", "binary", "regression")

# which auxiliary terms each training phase switches on
PHASE_TERMS = {
    "warmup": (),
    "network": (),
    "policy": ("sparsity", "sharing"),
    "retrain": ("instance",),
}


@dataclass
class LossWeights:
    task: list[float] = field(default_factory=lambda: [1.0, 1.0])
    sparsity: float = 0.005
    sharing: float = 0.005
    instance: float = 1.0
    target_rate: float = 1.0
    ordered_pairs: bool = False

    def __post_init__(self):
        self.task = [float(v) for v in self.task]
        if any(v < 0 for v in [*self.task, self.sparsity, self.sharing, self.instance]):
            raise ValueError("loss weights must be non-negative")
        if not 0 < self.target_rate <= 1:
            raise ValueError(f"target rate must be in (0, 1], got {self.target_rate}")


def sparsity_loss(alpha: Tensor, mask=None) -> Tensor:
    """Sum of ``log alpha`` over the entries selected by ``mask`` (all if None)."""
    alpha = T.as_tensor(alpha)
    picked = alpha if mask is None else T.getitem(alpha, np.asarray(mask, dtype=bool))
    if picked.size == 0:
        return Tensor(0.0)
    if np.any((picked.data <= 0) | (picked.data >= 1)):
        raise ValueError("sparsity loss needs alpha strictly inside (0, 1)")
    return T.sum_(T.log(picked))


def sharing_weights(L: int) -> np.ndarray:
    """``(L - l) / L`` for blocks ``l = 1..L``: the first block shares most."""
    return (L - np.arange(1, L + 1)) / L


def sharing_loss(alpha: Tensor, ordered: bool = False) -> Tensor:
    """Depth-weighted L1 disagreement between task columns of ``alpha``."""
    alpha = T.as_tensor(alpha)
    L, K = alpha.shape
    w = Tensor(sharing_weights(L))
    terms = []
    for k1 in range(K):
        for k2 in range(k1 + 1, K):
            diff = T.abs_(T.sub(alpha[:, k1], alpha[:, k2]))
            terms.append(T.sum_(T.mul(w, diff)))
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return T.mul(total, 2.0) if ordered else total


def instance_loss(beta: Tensor, target_rate: float) -> Tensor:
    """Squared deviation of per-block execute rates from the target rate."""
    beta = T.as_tensor(beta)
    if beta.size == 0:
        return Tensor(0.0)
    return T.sum_(T.square(T.sub(beta, target_rate)))


def task_loss(output: Tensor, target, kind: str) -> Tensor:
    """Mean cross-entropy / binary cross-entropy / squared error over the batch."""
    target = np.asarray(target)
    n = output.shape[0]
    if kind == "classification":
        C = output.shape[1]
        labels = target.astype(np.int64)
        if labels.shape != (n,) or np.any(labels < 0) or np.any(labels >= C):
            raise ValueError(f"class labels must lie in [0, {C})")
        logp = T.log_softmax(output, axis=1)
        return T.neg(T.mean(logp[np.arange(n), labels]))
    if kind == "binary":
        z = output[:, 0] if output.ndim == 2 else output
        y = target.astype(np.float64).reshape(n)
        if np.any((y != 0) & (y != 1)):
            raise ValueError("binary labels must be 0 or 1")
        return T.mean(T.sub(T.softplus(z), T.mul(z, Tensor(y))))
    if kind == "regression":
        pred = output[:, 0] if output.ndim == 2 else output
        y = target.astype(np.float64).reshape(n)
        return T.mean(T.square(T.sub(pred, Tensor(y))))
    raise ValueError(f"unknown task kind {kind!r}")


def total_loss(task_losses: Sequence[Tensor], aux: Mapping[str, Tensor],
               weights: LossWeights, phase: str) -> Tensor:
    if phase not in PHASE_TERMS:
        raise ValueError(f"unknown phase {phase!r}")
    if len(task_losses) != len(weights.task):
        raise ValueError(f"{len(task_losses)} task losses but {len(weights.task)} task weights")
    total = None
    for lam, lk in zip(weights.task, task_losses):
        term = T.mul(lk, lam)
        total = term if total is None else T.add(total, term)
    for name in PHASE_TERMS[phase]:
        lam = getattr(weights, name)
        if name in aux and lam != 0.0:
            total = T.add(total, T.mul(aux[name], lam))
    return total
