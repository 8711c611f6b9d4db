"""Optimizers: AdamW with decoupled weight decay, plus plain SGD.

AdamW defaults follow the usual convention (beta1=0.9, beta2=0.999,
eps=1e-8, weight_decay=0.01). Note the exact defaults are an assumption;
they are exposed so configurations can pin their own values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import ContractError
from .params import ParamSet


@dataclass
class AdamWState:
    """Per-parameter moment buffers plus the scalar hyperparameters."""

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: ParamSet, grads: Dict[str, np.ndarray], state: AdamWState) -> ParamSet:
    """One AdamW update over every parameter in ``params``, in place.

    ``grads`` must cover every parameter; a missing entry is a contract
    violation. Weight decay is decoupled (applied directly to the weights,
    not through the moments).
    """
    for name, _ in params.items():
        if name not in grads:
            raise ContractError(f"missing gradient for parameter {name!r}")

    state.step_count += 1
    t = state.step_count
    lr, b1, b2 = state.learning_rate, state.beta1, state.beta2
    bc1 = 1.0 - b1 ** t
    bc2 = 1.0 - b2 ** t

    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64).reshape(p.shape)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        if state.weight_decay != 0.0:
            p.data -= lr * state.weight_decay * p.data
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.epsilon)
    return params


class AdamW:
    """Loop-friendly wrapper: reads gradients off the parameters themselves."""

    def __init__(self, params: ParamSet, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.state = AdamWState(learning_rate=lr, beta1=beta1, beta2=beta2,
                                epsilon=epsilon, weight_decay=weight_decay)

    def step(self) -> None:
        grads = {}
        for name, p in self.params.items():
            grads[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
        adamw_step(self.params, grads, self.state)

    def zero_grad(self) -> None:
        self.params.zero_grad()


class SGD:
    """Plain gradient descent, the literal update rule of the joint loop."""

    def __init__(self, params: ParamSet, lr: float):
        self.params = params
        self.lr = lr

    def step(self) -> None:
        for _, p in self.params.items():
            if p.grad is not None:
                p.data -= self.lr * p.grad

    def zero_grad(self) -> None:
        self.params.zero_grad()


def make_optimizer(kind: str, params: ParamSet, lr: float, weight_decay: float = 0.01):
    if kind == "adamw":
        return AdamW(params, lr=lr, weight_decay=weight_decay)
    if kind == "sgd":
        return SGD(params, lr=lr)
    raise ContractError(f"unknown optimizer kind {kind!r}")
