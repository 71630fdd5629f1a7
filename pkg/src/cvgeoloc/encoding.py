"""Fixed 2D sine positional encodings and the query click channel."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .config import CLICK_SIGMA
from .errors import ConfigError, InputError, ShapeError
from .numerics import Tensor, add


@dataclass(frozen=True)
class PosEnc2D:
    d_model: int
    height: int
    width: int
    table: np.ndarray  # d_model x H x W, read-only

    def flat(self) -> np.ndarray:
        """Table flattened to ``d_model x (H*W)`` in row-major pixel order."""
        return self.table.reshape(self.d_model, self.height * self.width)


@lru_cache(maxsize=64)
def _table(d_model: int, height: int, width: int) -> np.ndarray:
    j = np.arange(d_model // 4, dtype=np.float64)
    denom = 10000.0 ** (2.0 * j / d_model)
    xs = np.arange(width, dtype=np.float64)[None, None, :] / denom[:, None, None]
    ys = np.arange(height, dtype=np.float64)[None, :, None] / denom[:, None, None]
    table = np.empty((d_model // 4, 4, height, width))
    table[:, 0] = np.sin(xs)
    table[:, 1] = np.cos(xs)
    table[:, 2] = np.sin(ys)
    table[:, 3] = np.cos(ys)
    table = table.reshape(d_model, height, width)
    table.setflags(write=False)
    return table


def build_posenc(d_model: int, height: int, width: int) -> PosEnc2D:
    """Channel ``4j`` holds sin(x / 10000^(2j/d)), ``4j+1`` its cosine,
    ``4j+2``/``4j+3`` the same pair for y. x is the column, y the row."""
    if d_model <= 0 or d_model % 4:
        raise ConfigError(f"d_model must be a positive multiple of 4, got {d_model}")
    if height <= 0 or width <= 0:
        raise ConfigError(f"grid must be non-empty, got {height}x{width}")
    return PosEnc2D(d_model, height, width, _table(d_model, height, width))


def add_posenc(features, pe: PosEnc2D) -> Tensor:
    """Add ``pe`` to a ``C x H x W`` (or batched) feature map."""
    if not isinstance(features, Tensor):
        features = Tensor(features)
    if features.shape[-3:] != pe.table.shape:
        raise ShapeError(f"add_posenc: features {features.shape} vs encoding {pe.table.shape}")
    return add(features, pe.table.astype(features.dtype))


@dataclass(frozen=True)
class ClickEncoding:
    sigma: float
    channel: np.ndarray  # 1 x H x W


def encode_click(click, height: int, width: int, sigma: float = CLICK_SIGMA) -> ClickEncoding:
    x_q, y_q = click
    if not (0 <= x_q < width and 0 <= y_q < height):
        raise InputError(f"click ({x_q}, {y_q}) outside {width}x{height} image")
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    d2 = (xs - x_q) ** 2 + (ys - y_q) ** 2
    return ClickEncoding(sigma, np.exp(-d2 / (2.0 * sigma ** 2))[None])
