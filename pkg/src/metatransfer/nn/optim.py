from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import TrainingError
from .layers import ParamStore


def adam_step(store: ParamStore, lr: float = 0.001, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update of every parameter in ``store``.

    Parameters without a gradient are treated as having a zero gradient.
    """
    for name in store.names():
        g = store[name].grad
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient for parameter {name}")
    store.step += 1
    t = store.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name in store.names():
        p = store[name]
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        m = store.m.get(name)
        v = store.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        store.m[name] = m
        store.v[name] = v
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


@dataclass
class Adam:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def step(self, store: ParamStore) -> None:
        adam_step(store, self.lr, self.beta1, self.beta2, self.eps)
