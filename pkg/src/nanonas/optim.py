"""Parameter update rules: momentum SGD for network weights, Adam for
architecture logits. A step with any non-finite gradient is rejected before
touching state."""

from __future__ import annotations

import math

import numpy as np

from .engine import NumericsError, Tensor


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Half-cosine decay from base_lr to 0 over total_steps."""
    if total_steps <= 0:
        return base_lr
    t = min(step, total_steps) / total_steps
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t))


class OptimizerState:
    """Named per-parameter buffers plus a strictly increasing step counter."""

    def __init__(self):
        self.buffers: dict[str, dict[str, np.ndarray]] = {}
        self.step_count = 0

    def get(self, name: str, param: Tensor, keys) -> dict[str, np.ndarray]:
        buf = self.buffers.get(name)
        if buf is None:
            buf = {k: np.zeros_like(param.data, dtype=np.float64) for k in keys}
            self.buffers[name] = buf
        return buf


class _OptimizerBase:
    def __init__(self, params: dict[str, Tensor], lr: float):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = dict(params)
        self.lr = lr
        self.state = OptimizerState()

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def _gather_grads(self):
        grads = {}
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericsError(f"non-finite gradient for parameter {name!r}")
            grads[name] = g
        return grads

    def replace_param(self, name: str, new_param: Tensor, keep_indices=None):
        """Swap a parameter (e.g. after pruning), slicing buffers to keep_indices."""
        self.params[name] = new_param
        buf = self.state.buffers.get(name)
        if buf is not None and keep_indices is not None:
            self.state.buffers[name] = {k: v[keep_indices].copy() for k, v in buf.items()}
        elif buf is not None and buf[next(iter(buf))].shape != new_param.shape:
            del self.state.buffers[name]


class MomentumSGD(_OptimizerBase):
    def __init__(self, params, lr, momentum=0.9):
        super().__init__(params, lr)
        self.momentum = momentum

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        grads = self._gather_grads()
        for name, g in grads.items():
            p = self.params[name]
            v = self.state.get(name, p, ("velocity",))["velocity"]
            v *= self.momentum
            v += g
            p.data = p.data - (lr * v).astype(p.data.dtype)
        self.state.step_count += 1


class Adam(_OptimizerBase):
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        super().__init__(params, lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        grads = self._gather_grads()
        self.state.step_count += 1
        t = self.state.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = self.params[name]
            buf = self.state.get(name, p, ("m", "v"))
            buf["m"] *= self.beta1
            buf["m"] += (1.0 - self.beta1) * g
            buf["v"] *= self.beta2
            buf["v"] += (1.0 - self.beta2) * g * g
            m_hat = buf["m"] / bias1
            v_hat = buf["v"] / bias2
            p.data = p.data - (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)


def optimizer_step(kind: str, params: dict[str, Tensor], lr: float, optimizer=None):
    """One update of the named parameters from their .grad fields.

    kind "weight" applies momentum SGD (mu=0.9); kind "arch" applies Adam
    (0.9, 0.999, 1e-8). Pass the returned optimizer back in to keep state.
    """
    if optimizer is None:
        if kind == "weight":
            optimizer = MomentumSGD(params, lr)
        elif kind == "arch":
            optimizer = Adam(params, lr)
        else:
            raise ValueError(f"unknown optimizer kind {kind!r}")
    optimizer.step(lr=lr)
    return optimizer
