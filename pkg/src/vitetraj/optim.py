"""Adam optimizer over named parameters."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params, grads, lr, state: AdamState, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update applied in place to ``params`` (name -> Parameter).

    Returns the names that had no gradient and were therefore left untouched.
    """
    state.step += 1
    t = state.step
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    skipped = []
    for name in sorted(params):
        p = params[name]
        g = grads.get(name)
        if g is None:
            skipped.append(name)
            log.warning("no gradient for parameter %s; skipped", name)
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p.data = p.data - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return skipped


class Adam:
    def __init__(self, params, lr=1e-3):
        self.params = params
        self.lr = lr
        self.state = AdamState()

    def step(self, grads):
        return optimizer_step(self.params, grads, self.lr, self.state)
