from .tensor import GradTape, Tensor, as_tensor
from .ops import (
    add, clamp, concat, conv2d, deconv2d, elementwise_mul, exp, log, matmul, mean, mul, power,
    relu, reshape, scale, sigmoid, softmax, sub, take, transpose, unbroadcast,
)
from .ops import sum as sum_
from .gradcheck import grad_check
from .init import uniform_fan_in, zeros

__all__ = [
    "GradTape", "Tensor", "as_tensor", "add", "clamp", "concat", "conv2d", "deconv2d",
    "elementwise_mul", "exp", "log", "matmul", "mean", "mul", "power", "relu", "reshape", "scale",
    "sigmoid", "softmax", "sub", "sum_", "take", "transpose", "unbroadcast", "grad_check",
    "uniform_fan_in", "zeros",
]
