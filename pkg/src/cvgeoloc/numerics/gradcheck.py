from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ConfigError, ContractError
from .tensor import GradTape, Tensor


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, eps: float = 1e-5,
               probes: int | None = None, seed: int = 0) -> float:
    """Max relative error between tape gradients and central differences.

    The error per element is ``|analytic - numeric| / max(1, |analytic|)``.
    ``probes`` limits the comparison to that many randomly chosen elements
    of ``x``; by default every element is checked.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = np.array(x.data, dtype=np.float64)
    leaf = Tensor(base.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(leaf)
        if not isinstance(y, Tensor) or y.size != 1:
            shape = getattr(y, "shape", type(y).__name__)
            raise ContractError(f"grad_check needs a scalar-valued function, got {shape}")
        tape.backward(y)
    analytic = leaf.grad.reshape(-1)

    flat_idx = np.arange(base.size)
    if probes is not None and probes < base.size:
        flat_idx = np.sort(np.random.default_rng(seed).choice(base.size, probes, replace=False))

    worst = 0.0
    for i in flat_idx:
        bumped = base.copy().reshape(-1)
        bumped[i] += eps
        hi = f(Tensor(bumped.reshape(base.shape))).item()
        bumped[i] -= 2 * eps
        lo = f(Tensor(bumped.reshape(base.shape))).item()
        numeric = (hi - lo) / (2 * eps)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    return worst
