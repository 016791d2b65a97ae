"""SGD and Adam over lists of parameter tensors."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class OptimizerState:
    kind: str  # "sgd" | "adam"
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def hyper(self):
        return {"kind": self.kind, "lr": self.lr, "beta1": self.beta1,
                "beta2": self.beta2, "eps": self.eps, "t": self.t}


def _check(params, grads):
    if len(params) != len(grads):
        raise ContractError(f"{len(params)} parameters but {len(grads)} gradients")
    for p, g in zip(params, grads):
        if np.shape(g) != p.data.shape:
            raise ContractError(f"gradient shape {np.shape(g)} != parameter shape {p.data.shape}")


def sgd_step(state, params, grads):
    _check(params, grads)
    for p, g in zip(params, grads):
        p.data -= state.lr * np.asarray(g)
    state.t += 1
    return params


def adam_step(state, params, grads):
    if state.kind != "adam":
        raise ContractError(f"adam_step on a '{state.kind}' state")
    _check(params, grads)
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    for p, m in zip(params, state.m):
        if m.shape != p.data.shape:
            raise ContractError("optimizer slot shape does not match its parameter")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        g = np.asarray(g)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


class Optimizer:
    """Binds an OptimizerState to a fixed parameter list."""

    def __init__(self, params, state):
        self.params = list(params)
        self.state = state

    def step(self, grads=None):
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if self.state.kind == "adam":
            adam_step(self.state, self.params, grads)
        else:
            sgd_step(self.state, self.params, grads)


def SGD(params, lr):
    return Optimizer(params, OptimizerState("sgd", lr))


def Adam(params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    return Optimizer(params, OptimizerState("adam", lr, beta1, beta2, eps))
