"""Central finite-difference oracle for reverse-mode gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def check_gradient(loss: Callable[[], Tensor], params: Sequence[Tensor],
                   eps: float = 1e-5) -> float:
    """Compare reverse-mode gradients of `loss()` against central differences.

    `loss` must be a deterministic closure over `params` (leaf tensors with
    requires_grad). Returns the max over all coordinates of
    |analytic - fd| / max(1, |analytic|).
    """
    for p in params:
        p.grad = None
    out = loss()
    if out.size != 1:
        raise ValueError("loss must be scalar")
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss().item()
            flat[i] = orig - eps
            lo = loss().item()
            flat[i] = orig
            fd = (hi - lo) / (2.0 * eps)
            err = abs(aflat[i] - fd) / max(1.0, abs(aflat[i]))
            if err > worst:
                worst = err
    return worst
