"""Bias-corrected Adam with decoupled weight decay."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads):
    """One update of ``params`` (name -> Tensor) in place; returns ``params``.

    Weight decay is decoupled: ``p <- p - lr * wd * p`` before the Adam move.
    Parameters whose gradient is None are left untouched.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        data = p.data
        if state.weight_decay:
            data = data - state.lr * state.weight_decay * data
        p.data = data - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params


def zero_grad(params):
    for p in params.values():
        p.grad = None
