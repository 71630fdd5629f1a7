"""Anchor-based localization: priors, targets, losses, decoding, selection.

Raw head output has ``9*5`` channels per grid cell; channel ``5*a + t``
holds field ``t`` (x, y, w, h, confidence logit) of anchor ``a``.
Predicted boxes are enumerated anchor-major: flat index
``(a * H_g + row) * W_g + col``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import BCE_EPS, BOX_PARAMS, NUM_ANCHORS
from .errors import InputError
from .numerics import Tensor


@dataclass(frozen=True)
class BBox:
    """Center-format box in pixels."""
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise InputError(f"box needs positive size, got w={self.w}, h={self.h}")

    def corners(self) -> tuple[float, float, float, float]:
        return (self.x - self.w / 2, self.y - self.h / 2, self.x + self.w / 2, self.y + self.h / 2)

    @classmethod
    def from_corners(cls, x0, y0, x1, y1) -> "BBox":
        return cls((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.w, self.h)


@dataclass(frozen=True)
class AnchorSet:
    anchors: np.ndarray  # n x 2 (w, h), ascending area

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.float64)
        if a.ndim != 2 or a.shape[1] != 2 or not np.all(a > 0):
            raise InputError(f"anchors must be positive (w, h) pairs, got shape {a.shape}")
        object.__setattr__(self, "anchors", a)

    def __len__(self):
        return len(self.anchors)

    def save(self, path) -> None:
        lines = [f"{w!r} {h!r}" for w, h in self.anchors.tolist()]
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path, expected: int = NUM_ANCHORS) -> "AnchorSet":
        rows = []
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 2:
                raise InputError(f"{path}:{lineno}: expected 'w h', got {line!r}")
            rows.append([float(parts[0]), float(parts[1])])
        if len(rows) != expected:
            raise InputError(f"{path}: expected {expected} anchors, found {len(rows)}")
        return cls(np.array(rows))


def shape_iou(wh: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """IoU of boxes sharing a common center; ``wh`` is ``n x 2``, result ``n x k``."""
    wh = np.atleast_2d(wh)[:, None, :]
    c = np.atleast_2d(centroids)[None, :, :]
    inter = np.minimum(wh[..., 0], c[..., 0]) * np.minimum(wh[..., 1], c[..., 1])
    union = wh[..., 0] * wh[..., 1] + c[..., 0] * c[..., 1] - inter
    return inter / union


def cluster_anchors(boxes, n: int = NUM_ANCHORS, iters: int = 300, seed: int = 0) -> AnchorSet:
    """k-means over (w, h) with distance ``1 - IoU`` and mean centroids."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 2)
    if len(boxes) < n:
        raise InputError(f"need at least {n} boxes to cluster, got {len(boxes)}")
    rng = np.random.default_rng(seed)
    centroids = boxes[rng.choice(len(boxes), n, replace=False)].copy()
    assign = None
    for _ in range(iters):
        nearest = np.argmin(1.0 - shape_iou(boxes, centroids), axis=1)
        if assign is not None and np.array_equal(nearest, assign):
            break
        assign = nearest
        for j in range(n):
            members = boxes[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)
    order = np.argsort(centroids[:, 0] * centroids[:, 1], kind="stable")
    return AnchorSet(centroids[order])


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    cell_size: float

    @property
    def image_size(self) -> tuple[float, float]:
        return (self.cols * self.cell_size, self.rows * self.cell_size)


@dataclass
class PredictionGrid:
    raw: Tensor  # (9*5) x H_g x W_g, or batched
    cell_size: float

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.raw.shape[-2], self.raw.shape[-1], self.cell_size)

    @property
    def num_anchors(self) -> int:
        return self.raw.shape[-3] // BOX_PARAMS

    @property
    def num_boxes(self) -> int:
        g = self.grid
        return self.num_anchors * g.rows * g.cols

    def fields(self) -> np.ndarray:
        """Raw values as ``[N x] anchors x 5 x H_g x W_g``."""
        d = self.raw.data
        return d.reshape(d.shape[:-3] + (self.num_anchors, BOX_PARAMS) + d.shape[-2:])


@dataclass
class TargetAssignment:
    row: int
    col: int
    anchor: int
    offsets: np.ndarray  # (x - floor x, y - floor y, log w/w_a, log h/h_a)
    labels: np.ndarray   # anchors x H_g x W_g, single 1


def assign_target(gt: BBox, anchors: AnchorSet, grid: GridSpec) -> TargetAssignment:
    width, height = grid.image_size
    if not (0 <= gt.x < width and 0 <= gt.y < height):
        raise InputError(f"box center ({gt.x}, {gt.y}) outside {width}x{height} reference image")
    cx, cy = gt.x / grid.cell_size, gt.y / grid.cell_size
    col, row = math.floor(cx), math.floor(cy)
    ious = shape_iou(np.array([[gt.w, gt.h]]), anchors.anchors)[0]
    a = int(np.argmax(ious))  # first maximum wins ties
    wa, ha = anchors.anchors[a]
    offsets = np.array([cx - col, cy - row, math.log(gt.w / wa), math.log(gt.h / ha)])
    labels = np.zeros((len(anchors), grid.rows, grid.cols))
    labels[a, row, col] = 1.0
    return TargetAssignment(row, col, a, offsets, labels)


def _as_batch(raw: Tensor, targets):
    if isinstance(targets, TargetAssignment):
        targets = [targets]
    if raw.ndim == 3:
        raw = nx.reshape(raw, (1,) + raw.shape)
    if raw.shape[0] != len(targets):
        raise InputError(f"{raw.shape[0]} predictions for {len(targets)} targets")
    n, ch, hg, wg = raw.shape
    return nx.reshape(raw, (n, ch // BOX_PARAMS, BOX_PARAMS, hg, wg)), targets


def _raw(pred):
    return pred.raw if isinstance(pred, PredictionGrid) else pred


def confidence_loss(pred, targets, eps: float = BCE_EPS) -> Tensor:
    """Binary cross-entropy summed over every box of a sample, batch-averaged."""
    fields, targets = _as_batch(_raw(pred), targets)
    n = len(targets)
    labels = np.stack([t.labels for t in targets]).astype(fields.dtype)
    logits = nx.take(fields, (slice(None), slice(None), 4))
    p = nx.clamp(nx.sigmoid(logits), eps, 1.0 - eps)
    ll = nx.add(nx.mul(labels, nx.log(p)), nx.mul(1.0 - labels, nx.log(nx.sub(1.0, p))))
    return nx.scale(nx.sum_(ll), -1.0 / n)


def localization_loss(pred, targets) -> Tensor:
    """Squared offset error at each sample's positive box, batch-averaged.

    Centre offsets pass through a sigmoid before comparison.
    """
    fields, targets = _as_batch(_raw(pred), targets)
    n = len(targets)
    idx = (np.arange(n), np.array([t.anchor for t in targets]), slice(0, 4),
           np.array([t.row for t in targets]), np.array([t.col for t in targets]))
    pos = nx.take(fields, idx)  # n x 4
    xy = nx.sigmoid(nx.take(pos, (slice(None), slice(0, 2))))
    wh = nx.take(pos, (slice(None), slice(2, 4)))
    offsets = np.stack([t.offsets for t in targets]).astype(fields.dtype)
    diff = nx.sub(nx.concat([xy, wh], axis=1), offsets)
    return nx.scale(nx.sum_(nx.mul(diff, diff)), 1.0 / n)


def total_loss(pred, targets) -> Tensor:
    return nx.add(confidence_loss(pred, targets), localization_loss(pred, targets))


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z)) if z >= 0 else math.exp(z) / (1.0 + math.exp(z))


def decode_box(raw, cell: tuple[int, int], anchor, cell_size: float) -> BBox:
    """``raw`` = (x, y, w, h[, conf]); ``cell`` = (col, row); ``anchor`` = (w_a, h_a)."""
    tx, ty, tw, th = (float(v) for v in list(raw)[:4])
    col, row = cell
    wa, ha = anchor
    return BBox((col + _sigmoid(tx)) * cell_size, (row + _sigmoid(ty)) * cell_size,
                wa * math.exp(tw), ha * math.exp(th))


def encode_box(box: BBox, cell: tuple[int, int], anchor, cell_size: float) -> np.ndarray:
    """Inverse of :func:`decode_box` for a box whose centre lies inside ``cell``."""
    col, row = cell
    fx = box.x / cell_size - col
    fy = box.y / cell_size - row
    wa, ha = anchor
    return np.array([math.log(fx / (1 - fx)), math.log(fy / (1 - fy)),
                     math.log(box.w / wa), math.log(box.h / ha)])


def unravel(flat: int, num_anchors: int, grid: GridSpec) -> tuple[int, int, int]:
    """Flat box index -> (anchor, row, col)."""
    a, rest = divmod(flat, grid.rows * grid.cols)
    row, col = divmod(rest, grid.cols)
    return a, row, col


def select_prediction(pred: PredictionGrid, anchors: AnchorSet):
    """Box with the highest confidence (lowest flat index on ties).

    Returns ``(box, flat_index, confidence)``. Logits are compared directly,
    which orders boxes exactly as the sigmoid confidences do.
    """
    f = pred.fields()
    if f.ndim != 4:
        raise InputError("select_prediction takes a single (unbatched) grid")
    logits = f[:, 4].reshape(-1)
    flat = int(np.argmax(logits))
    a, row, col = unravel(flat, f.shape[0], pred.grid)
    box = decode_box(f[a, :4, row, col], (col, row), anchors.anchors[a], pred.cell_size)
    return box, flat, _sigmoid(float(logits[flat]))
