"""Binary Gumbel-Softmax sampling: hard, relaxed and straight-through.

All samplers take the trailing axis of size 2 as ``[skip, execute]`` and
accept the Gumbel noise explicitly so tests can inject it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

UNIFORM_EPS = 1e-12


def gumbel_from_uniform(u) -> np.ndarray:
    u = np.clip(np.asarray(u, dtype=np.float64), UNIFORM_EPS, 1.0 - UNIFORM_EPS)
    return -np.log(-np.log(u))


def sample_gumbel(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard Gumbel draws ``-log(-log U)`` with ``U`` clamped away from 0 and 1."""
    if np.prod(shape) < 1:
        raise ValueError(f"need at least one draw, got shape {shape}")
    return gumbel_from_uniform(rng.random(shape))


@dataclass
class BernoulliLogits:
    """Execute-probability ``alpha`` stored as a trainable logit pair.

    ``pi = softmax(logits) = [1 - alpha, alpha]`` along the last axis.
    """

    logits: Tensor

    def __post_init__(self):
        self.logits = T.as_tensor(self.logits)
        if self.logits.shape[-1:] != (2,):
            raise T.ShapeError("BernoulliLogits", self.logits.shape, (2,))

    @classmethod
    def from_alpha(cls, alpha, requires_grad: bool = False) -> BernoulliLogits:
        alpha = np.asarray(alpha, dtype=np.float64)
        if np.any((alpha <= 0) | (alpha >= 1)):
            raise ValueError("alpha must lie strictly inside (0, 1)")
        logits = np.stack([np.log1p(-alpha), np.log(alpha)], axis=-1)
        return cls(Tensor(logits, requires_grad=requires_grad))

    def log_pi(self) -> Tensor:
        return T.log_softmax(self.logits, axis=-1)

    def pi(self) -> Tensor:
        return T.softmax(self.logits, axis=-1)

    @property
    def alpha(self) -> np.ndarray:
        return self.pi().data[..., 1]


def _log_pi(pi) -> Tensor:
    if isinstance(pi, BernoulliLogits):
        return pi.log_pi()
    return T.log(T.as_tensor(pi))


def hard_sample(pi, g) -> np.ndarray:
    """``argmax_j log pi(j) + g(j)``; ties go to 1 (execute)."""
    lp = _log_pi(pi).data
    g = np.asarray(g, dtype=np.float64)
    return (lp[..., 1] + g[..., 1] >= lp[..., 0] + g[..., 0]).astype(np.int64)


def relaxed_sample(pi, g, tau: float) -> Tensor:
    """Tempered softmax of ``(log pi + g) / tau``; differentiable in the logits."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    scores = T.add(_log_pi(pi), Tensor(g))
    return T.softmax(T.mul(scores, 1.0 / tau), axis=-1)


def one_hot(bits: np.ndarray) -> np.ndarray:
    bits = np.asarray(bits)
    return np.stack([1.0 - bits, bits.astype(np.float64)], axis=-1)


def straight_through(hard_bits: np.ndarray, relaxed: Tensor) -> Tensor:
    """One-hot forward value carrying the gradient of ``relaxed``."""
    # relaxed - stop(relaxed) is exactly zero, so the forward value stays one-hot
    return T.add(Tensor(one_hot(hard_bits)), T.sub(relaxed, relaxed.detach()))


def straight_through_sample(pi, g, tau: float) -> Tensor:
    relaxed = relaxed_sample(pi, g, tau)
    return straight_through(hard_sample(pi, g), relaxed)


@dataclass
class TemperatureSchedule:
    initial: float = 5.0
    decay_rate: float = 0.965
    decay_trigger: str = "on_metric_met"
    floor: float = 0.5
    tau: float | None = None

    def __post_init__(self):
        if self.initial <= 0 or self.floor <= 0:
            raise ValueError("temperatures must be positive")
        if not 0 < self.decay_rate <= 1:
            raise ValueError("decay_rate must be in (0, 1]")
        if self.decay_trigger not in ("every_epoch", "on_metric_met"):
            raise ValueError(f"unknown decay trigger {self.decay_trigger!r}")
        if self.tau is None:
            self.tau = max(self.floor, self.initial)

    def step(self, trigger_fired: bool) -> float:
        if trigger_fired:
            self.tau = max(self.floor, self.tau * self.decay_rate)
        return self.tau


def step_temperature(sched: TemperatureSchedule, trigger_fired: bool) -> float:
    return sched.step(trigger_fired)
