"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from .autograd import Tensor

# Central differences with h = 1e-5 carry ~1e-11 round-off, so gradients
# below this floor are judged on absolute error (tolerance * floor).
ABS_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_param: str | None
    worst_index: tuple | None
    n_checked: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), ABS_FLOOR)


def grad_check(loss_fn: Callable[[], Tensor], params: Mapping[str, Tensor], *,
               tolerance: float = 1e-4, h: float = 1e-5, max_coords: int | None = None,
               seed: int = 0) -> GradCheckReport:
    """Compare backprop gradients of ``loss_fn()`` with central differences.

    Every coordinate of every parameter is perturbed unless ``max_coords`` is
    given and smaller than the parameter count, in which case a seeded random
    subsample of that many coordinates is checked. ``loss_fn`` must be
    deterministic (dropout off).
    """
    names = sorted(params)
    for name in names:
        params[name].grad = None
    loss = loss_fn()
    loss.backward()
    analytic = {n: (params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data))
                for n in names}

    coords = [(n, idx) for n in names for idx in np.ndindex(params[n].shape)]
    if max_coords is not None and len(coords) > max_coords:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(coords), size=max_coords, replace=False))
        coords = [coords[i] for i in pick]

    flags = {n: params[n].requires_grad for n in names}
    for n in names:
        params[n].requires_grad = False
    worst = (0.0, None, None)
    try:
        for name, idx in coords:
            data = params[name].data
            orig = data[idx]
            data[idx] = orig + h
            up = float(loss_fn().data)
            data[idx] = orig - h
            down = float(loss_fn().data)
            data[idx] = orig
            numeric = (up - down) / (2.0 * h)
            err = relative_error(float(analytic[name][idx]), numeric)
            if err > worst[0]:
                worst = (err, name, idx)
    finally:
        for n in names:
            params[n].requires_grad = flags[n]
    return GradCheckReport(worst[0], worst[1], worst[2], len(coords), tolerance)
