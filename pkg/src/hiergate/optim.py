"""SGD with momentum and Adam over named parameter groups."""
from __future__ import annotations

import numpy as np

from .backbone import decode_array, encode_array
from .tensor import Tensor


class Optimizer:
    def __init__(self, params: dict[str, Tensor], lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = params
        self.lr = lr
        self.state: dict[str, dict[str, np.ndarray]] = {}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        for name, p in self.params.items():
            if p.grad is not None:
                p.data = p.data - self._update(name, p.grad)

    def _update(self, name: str, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def state_dict(self) -> dict:
        return {"lr": self.lr, "state": {n: {k: encode_array(v) for k, v in s.items()}
                                         for n, s in self.state.items()}}

    def load_state_dict(self, doc: dict) -> None:
        self.lr = doc["lr"]
        self.state = {n: {k: decode_array(v) for k, v in s.items()} for n, s in doc["state"].items()}


class SGD(Optimizer):
    def __init__(self, params, lr: float, momentum: float = 0.9):
        super().__init__(params, lr)
        self.momentum = momentum

    def _update(self, name, grad):
        st = self.state.setdefault(name, {"buf": np.zeros_like(grad)})
        st["buf"] = self.momentum * st["buf"] + grad
        return self.lr * st["buf"]


class Adam(Optimizer):
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.b1, self.b2 = betas
        self.eps = eps

    def _update(self, name, grad):
        st = self.state.setdefault(name, {"m": np.zeros_like(grad), "v": np.zeros_like(grad),
                                          "t": np.zeros(())})
        st["t"] = st["t"] + 1
        st["m"] = self.b1 * st["m"] + (1 - self.b1) * grad
        st["v"] = self.b2 * st["v"] + (1 - self.b2) * grad * grad
        m_hat = st["m"] / (1 - self.b1 ** st["t"])
        v_hat = st["v"] / (1 - self.b2 ** st["t"])
        return self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def step_lr(epoch: int, base: float, period: int) -> float:
    """Step decay: halve ``base`` every ``period`` epochs."""
    return base * 0.5 ** (epoch // period)
