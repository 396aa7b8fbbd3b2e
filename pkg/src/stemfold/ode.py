"""Fixed-step fourth-order Runge-Kutta integration, differentiable by
unrolling: the solver builds an ordinary tape, so reverse mode through it is
exact for the discrete computation."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import NumericalOverflow
from .tensor import Tensor, astensor, rk4_combine

OdeFunction = Callable[[Tensor], Tensor]


def rk4_integrate(f: OdeFunction, z0, t_grid: Sequence[float],
                  substeps: int = 1) -> list[Tensor]:
    """Integrate dz/dt = f(z) through the strictly increasing `t_grid`.

    Returns the state at every grid time; the first entry is `z0` itself.
    `substeps` internal RK4 steps are taken per grid interval (default 1).
    """
    t = np.asarray(t_grid, dtype=np.float64)
    if t.ndim != 1 or t.size < 1:
        raise ValueError("t_grid must be a non-empty 1-d sequence")
    if t.size > 1 and not np.all(np.diff(t) > 0):
        raise ValueError("t_grid must be strictly increasing")
    if substeps < 1:
        raise ValueError("substeps must be >= 1")
    z = astensor(z0)
    if not np.all(np.isfinite(z.data)):
        raise ValueError("z0 must be finite")

    states = [z]
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(t.size - 1):
            h = (t[k + 1] - t[k]) / substeps
            for _ in range(substeps):
                z = _rk4_step(f, z, h)
            if not np.all(np.isfinite(z.data)):
                raise NumericalOverflow(
                    f"non-finite state after step {k + 1} (t={t[k + 1]:g})")
            states.append(z)
    return states


def _rk4_step(f: OdeFunction, z: Tensor, h: float) -> Tensor:
    k1 = f(z)
    k2 = f(z + k1 * (h / 2.0))
    k3 = f(z + k2 * (h / 2.0))
    k4 = f(z + k3 * h)
    return rk4_combine(z, k1, k2, k3, k4, h)
