"""SGD and Adam operating in place on parameter tensors."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError, ShapeError


@dataclass
class OptimizerState:
    kind: str
    learning_rate: float
    weight_decay: float = 0.0
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ConfigError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if self.learning_rate < 0:
            raise ConfigError("learning rate must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")


def optimizer_step(params, grads, state):
    """Apply one update to ``params`` (arrays, modified in place).

    Weight decay is folded into the gradient (``g + wd * w``) for both
    kinds. Moments are keyed by position in ``params``.
    """
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} params but {len(grads)} grads")
    for w, g in zip(params, grads):
        if g is not None and w.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != parameter shape {w.shape}")
    state.step += 1
    lr = state.learning_rate
    for i, (w, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        if state.weight_decay:
            g = g + state.weight_decay * w
        if state.kind == "sgd":
            if state.momentum:
                buf = state.first_moment.get(i)
                buf = g.copy() if buf is None else state.momentum * buf + g
                state.first_moment[i] = buf
                g = buf
            w -= (lr * g).astype(w.dtype)
        else:
            m = state.first_moment.get(i)
            v = state.second_moment.get(i)
            if m is None:
                m = np.zeros_like(w)
                v = np.zeros_like(w)
            m = state.beta1 * m + (1 - state.beta1) * g
            v = state.beta2 * v + (1 - state.beta2) * g * g
            state.first_moment[i] = m
            state.second_moment[i] = v
            m_hat = m / (1 - state.beta1**state.step)
            v_hat = v / (1 - state.beta2**state.step)
            w -= (lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(w.dtype)
    return params


class Optimizer:
    """Binds an :class:`OptimizerState` to a fixed list of parameter tensors."""

    def __init__(self, params, state):
        self.params = list(params)
        self.state = state

    @property
    def lr(self):
        return self.state.learning_rate

    @lr.setter
    def lr(self, value):
        self.state.learning_rate = float(value)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        optimizer_step([p.data for p in self.params], [p.grad for p in self.params], self.state)


def SGD(params, lr, weight_decay=0.0, momentum=0.0):
    return Optimizer(params, OptimizerState("sgd", lr, weight_decay, momentum=momentum))


def Adam(params, lr=1e-3, weight_decay=0.0, betas=(0.9, 0.999), eps=1e-8):
    return Optimizer(params, OptimizerState("adam", lr, weight_decay, beta1=betas[0], beta2=betas[1], eps=eps))


def cosine_lr(base_lr, epoch, epochs):
    """Cosine decay from ``base_lr`` at epoch 0 towards 0 at ``epochs``."""
    return base_lr * 0.5 * (1 + math.cos(math.pi * epoch / epochs))
