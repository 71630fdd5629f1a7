import numpy as np

from .tensor import Tensor


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype=np.float64, name=None) -> Tensor:
    """Weights drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(dtype), requires_grad=True, name=name)


def zeros(shape, dtype=np.float64, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)
