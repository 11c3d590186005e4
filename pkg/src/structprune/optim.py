"""Adam with bias correction, written as a pure step function."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class AdamState:
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, **hyper):
        zeros = [np.zeros_like(np.asarray(p, dtype=np.float64)) for p in params]
        return cls(m=zeros, v=[z.copy() for z in zeros], **hyper)


def adam_step(params, grads, state):
    """One Adam update. Returns ``(new_params, new_state)``; inputs are untouched."""
    if not (len(params) == len(grads) == len(state.m) == len(state.v)):
        raise ContractError("params, grads and optimizer state differ in length")
    t = state.t + 1
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if np.shape(p) != np.shape(g) or np.shape(p) != np.shape(m):
            raise ContractError(f"shape mismatch: param {np.shape(p)}, grad {np.shape(g)}, state {np.shape(m)}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_params.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, m=new_m, v=new_v, t=t)
