"""SGD with Nesterov momentum, Adam, and the polynomial learning-rate decay.

The step functions are pure: they return fresh parameter arrays and a fresh
:class:`OptimizerState`, leaving their arguments untouched.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .layers import Module


@dataclass
class OptimizerState:
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    buffers: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)

    def copy(self) -> "OptimizerState":
        return copy.deepcopy(self)


def _check(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != np.shape(p):
            raise ValueError(f"gradient for {name} has shape {np.shape(g)}, parameter has {np.shape(p)}")


def sgd_nesterov_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
                      state: OptimizerState, lr: float | None = None):
    """g = grad + wd*p;  v = mu*v + g;  p = p - lr*(g + mu*v)."""
    _check(params, grads)
    lr = state.lr if lr is None else lr
    mu, wd = state.momentum, state.weight_decay
    new_state = state.copy()
    new_state.step += 1
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        g = g + wd * p if wd else g
        buf = new_state.buffers.setdefault(name, {})
        v = buf.get("velocity")
        v = g.copy() if v is None else mu * v + g
        buf["velocity"] = v
        out[name] = (p - lr * (g + mu * v)).astype(p.dtype)
    return out, new_state


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: OptimizerState, lr: float | None = None):
    """Bias-corrected adaptive-moment update."""
    _check(params, grads)
    lr = state.lr if lr is None else lr
    b1, b2, eps = state.beta1, state.beta2, state.eps
    new_state = state.copy()
    new_state.step += 1
    t = new_state.step
    out = {}
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            out[name] = p
            continue
        if state.weight_decay:
            g = g + state.weight_decay * p
        buf = new_state.buffers.setdefault(name, {})
        m = buf.get("m", np.zeros_like(p))
        v = buf.get("v", np.zeros_like(p))
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        buf["m"], buf["v"] = m, v
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        out[name] = (p - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.dtype)
    return out, new_state


def poly_lr(step: int, total_steps: int, lr0: float, exponent: float = 0.9) -> float:
    if total_steps <= 0 or step >= total_steps:
        return 0.0
    return lr0 * (1.0 - step / total_steps) ** exponent


class _ModuleOptimizer:
    _step_fn = None

    def __init__(self, module: Module, state: OptimizerState):
        self.module = module
        self.state = state

    def step(self, lr: float | None = None) -> None:
        named = dict(self.module.named_parameters())
        params = {k: t.data for k, t in named.items()}
        grads = {k: t.grad for k, t in named.items() if t.grad is not None}
        new, self.state = type(self)._step_fn(params, grads, self.state, lr)
        for k, t in named.items():
            t.data = new[k]

    def zero_grad(self) -> None:
        self.module.zero_grad()


class SGDNesterov(_ModuleOptimizer):
    _step_fn = staticmethod(sgd_nesterov_step)

    def __init__(self, module: Module, lr: float = 5e-2, momentum: float = 0.99, weight_decay: float = 3e-5):
        super().__init__(module, OptimizerState(lr=lr, momentum=momentum, weight_decay=weight_decay))


class Adam(_ModuleOptimizer):
    _step_fn = staticmethod(adam_step)

    def __init__(self, module: Module, lr: float = 1e-3, beta1: float = 0.0, beta2: float = 0.99, eps: float = 1e-8):
        super().__init__(module, OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps))
