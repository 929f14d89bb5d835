"""Adam over dictionaries of named parameter blocks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, block):
        super().__init__(f"non-finite gradient in parameter block '{block}'")
        self.block = block


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(state, params, grads, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns (new params, new state).

    Blocks missing from ``grads`` are left untouched. ``lr`` may be a float
    or a per-block dict.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(name)
    t = state.step + 1
    new_state = AdamState(t, dict(state.m), dict(state.v))
    out = dict(params)
    for name, g in grads.items():
        g = np.asarray(g, dtype=np.float64)
        m = beta1 * state.m.get(name, np.zeros_like(g)) + (1 - beta1) * g
        v = beta2 * state.v.get(name, np.zeros_like(g)) + (1 - beta2) * g * g
        new_state.m[name], new_state.v[name] = m, v
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        step = lr[name] if isinstance(lr, dict) else lr
        out[name] = params[name] - step * m_hat / (np.sqrt(v_hat) + eps)
    return out, new_state


class Adam:
    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        if not np.isfinite(lr) or lr <= 0:
            raise ValueError("learning rate must be finite and positive")
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.state = AdamState()

    def step(self, params, grads, lr=None):
        params, self.state = adam_step(self.state, params, grads, self.lr if lr is None else lr,
                                       self.beta1, self.beta2, self.eps)
        return params
