"""First-order optimizers updating ParamStore tensors in place."""

from __future__ import annotations

import numpy as np

from .tensor import Tensor


class MissingGradError(RuntimeError):
    pass


class Optimizer:
    def __init__(self, params: list[tuple[str, Tensor]], lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be > 0, got {lr}")
        self.params = list(params)
        self.lr = float(lr)

    def _grads(self):
        for name, p in self.params:
            if p.grad is None:
                raise MissingGradError(f"parameter {name!r} has no gradient")
            yield name, p, p.grad

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.zero_grad()

    def state_dict(self) -> dict:
        return {"kind": type(self).__name__.lower(), "lr": self.lr}

    def load_state_dict(self, state: dict) -> None:
        self.lr = float(state.get("lr", self.lr))


class SGD(Optimizer):
    def step(self) -> None:
        for _, p, g in self._grads():
            p.data -= (self.lr * g).astype(p.dtype, copy=False)
        self.zero_grad()


class Adam(Optimizer):
    def __init__(self, params, lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1 ** self.t, 1.0 - b2 ** self.t
        for name, p, g in self._grads():
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
        self.zero_grad()

    def state_dict(self) -> dict:
        return {"kind": "adam", "lr": self.lr, "t": self.t, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "m": self.m, "v": self.v}

    def load_state_dict(self, state: dict) -> None:
        super().load_state_dict(state)
        self.t = int(state.get("t", 0))
        for slot, target in (("m", self.m), ("v", self.v)):
            for name, arr in state.get(slot, {}).items():
                if name in target:
                    target[name][...] = arr


def make_optimizer(method: str, params, lr: float) -> Optimizer:
    if method == "adam":
        return Adam(params, lr=lr)
    if method == "sgd":
        return SGD(params, lr=lr)
    raise ValueError(f"unknown optimizer {method!r}")
