"""Optimizers and learning-rate schedules.

Both optimizers expose their full state as plain arrays so checkpoints can
resume bit-exactly.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor


class Optimizer:
    def __init__(self, params: dict[str, Tensor], lr: float):
        self.params = params
        self.lr = float(lr)
        self.step_count = 0

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_dict(self) -> dict:
        raise NotImplementedError

    def load_state_dict(self, state: dict):
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params, lr, momentum: float = 0.0):
        super().__init__(params, lr)
        self.momentum = float(momentum)
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.step_count += 1
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if self.momentum:
                v = self.velocity[name]
                v *= self.momentum
                v += p.grad
                p.data = p.data - (p.data.dtype.type(self.lr)) * v
            else:
                p.data = p.data - (p.data.dtype.type(self.lr)) * p.grad

    def state_dict(self):
        return {
            "kind": "sgd",
            "lr": self.lr,
            "momentum": self.momentum,
            "step_count": self.step_count,
            "velocity": {k: v.copy() for k, v in self.velocity.items()},
        }

    def load_state_dict(self, state):
        self.lr = float(state["lr"])
        self.momentum = float(state["momentum"])
        self.step_count = int(state["step_count"])
        for k in self.velocity:
            self.velocity[k] = np.asarray(state["velocity"][k], dtype=self.velocity[k].dtype).copy()


class Adam(Optimizer):
    def __init__(self, params, lr, betas=(0.9, 0.999), eps: float = 1e-8):
        super().__init__(params, lr)
        self.beta1, self.beta2 = float(betas[0]), float(betas[1])
        self.eps = float(eps)
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** t
        bc2 = 1.0 - b2 ** t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            mhat = m / bc1
            vhat = v / bc2
            p.data = p.data - p.data.dtype.type(self.lr) * (
                mhat / (np.sqrt(vhat) + self.eps)).astype(p.data.dtype)

    def state_dict(self):
        return {
            "kind": "adam",
            "lr": self.lr,
            "betas": (self.beta1, self.beta2),
            "eps": self.eps,
            "step_count": self.step_count,
            "m": {k: v.copy() for k, v in self.m.items()},
            "v": {k: v.copy() for k, v in self.v.items()},
        }

    def load_state_dict(self, state):
        self.lr = float(state["lr"])
        self.beta1, self.beta2 = (float(x) for x in state["betas"])
        self.eps = float(state["eps"])
        self.step_count = int(state["step_count"])
        for k in self.m:
            self.m[k] = np.asarray(state["m"][k], dtype=self.m[k].dtype).copy()
            self.v[k] = np.asarray(state["v"][k], dtype=self.v[k].dtype).copy()


def linear_warmhold_lr(base_lr: float, epoch: int, total_epochs: int,
                       hold_fraction: float = 2.0 / 3.0) -> float:
    """Constant for the first hold_fraction of epochs, then linear decay to 0.

    With a 15-epoch budget this is 10 constant + 5 decaying; other budgets
    keep the same 2:1 ratio.
    """
    hold = hold_fraction * total_epochs
    if epoch < hold or total_epochs <= hold:
        return base_lr
    remaining = total_epochs - hold
    frac = (total_epochs - epoch) / remaining
    return base_lr * max(0.0, min(1.0, frac))


def poly_decay_lr(base_lr: float, step: int, total_steps: int, power: float = 0.9) -> float:
    """Polynomial decay lr * (1 - step/total)^power."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step, 0), total_steps) / total_steps
    return base_lr * float((1.0 - frac) ** power)
