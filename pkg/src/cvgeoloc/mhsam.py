"""Multi-head spatial attention: three conv/ReLU/deconv heads gate the fused map."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import DEFAULT_EXPANSION
from .errors import ShapeError
from .numerics import Tensor

NUM_HEADS = 3


def head_kernel(i: int) -> int:
    """Kernel size of head ``i`` (1-based): 1, 3, 5."""
    return 2 * (i - 1) + 1


@dataclass
class HeadParams:
    conv_w: Tensor    # E*C x C x k x k
    conv_b: Tensor    # E*C
    deconv_w: Tensor  # E*C x C x k x k
    deconv_b: Tensor  # C

    @property
    def kernel(self) -> int:
        return self.conv_w.shape[-1]


@dataclass
class MHSAMParams:
    heads: list[HeadParams]

    @classmethod
    def init(cls, rng: np.random.Generator, channels: int, expansion: int = DEFAULT_EXPANSION,
             dtype=np.float64):
        heads = []
        for i in range(1, NUM_HEADS + 1):
            k = head_kernel(i)
            hidden = expansion * channels
            heads.append(HeadParams(
                conv_w=nx.uniform_fan_in(rng, (hidden, channels, k, k), channels * k * k, dtype),
                conv_b=nx.zeros((hidden,), dtype),
                deconv_w=nx.uniform_fan_in(rng, (hidden, channels, k, k), hidden * k * k, dtype),
                deconv_b=nx.zeros((channels,), dtype),
            ))
        return cls(heads)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, h in enumerate(self.heads, start=1):
            p = f"{prefix}.h{i}"
            out.update({f"{p}.conv_w": h.conv_w, f"{p}.conv_b": h.conv_b,
                        f"{p}.deconv_w": h.deconv_w, f"{p}.deconv_b": h.deconv_b})
        return out


def mhsam_head(f_fused: Tensor, params: MHSAMParams, i: int) -> Tensor:
    hp = params.heads[i - 1]
    k = hp.kernel
    h, w = f_fused.shape[-2:]
    if h < k or w < k:
        raise ShapeError(f"MHSAM head {i} needs at least {k}x{k} input, got {h}x{w}")
    hidden = nx.relu(nx.conv2d(f_fused, hp.conv_w, hp.conv_b, stride=1, pad=0))
    return nx.deconv2d(hidden, hp.deconv_w, hp.deconv_b, stride=1, pad=0)


def mhsam_forward(f_fused: Tensor, params: MHSAMParams, return_gate: bool = False):
    """O = sigmoid(H_1 + H_2 + H_3) * F, heads summed in order."""
    total = mhsam_head(f_fused, params, 1)
    for i in range(2, NUM_HEADS + 1):
        total = nx.add(total, mhsam_head(f_fused, params, i))
    gate = nx.sigmoid(total)
    out = nx.mul(gate, f_fused)
    return (out, gate) if return_gate else out
