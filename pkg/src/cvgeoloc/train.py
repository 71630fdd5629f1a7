"""Training loop (AdamW + step decay), inference and dataset evaluation."""
from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import config as C
from .detection import (AnchorSet, BBox, GridSpec, PredictionGrid, assign_target, cluster_anchors, select_prediction,
                        total_loss)
from .errors import ConfigError, InputError
from .evaluation import EvalRecord, EvalReport, iou
from .model import Model, ModelConfig, forward_arrays, prepare_inputs
from .numerics import GradTape, Tensor

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = C.EPOCHS
    lr: float = C.LR
    lr_decay: float = C.LR_DECAY
    lr_step: int = C.LR_STEP_EPOCHS
    batch_size: int = 8
    seed: int = 0
    weight_decay: float = C.WEIGHT_DECAY
    grad_clip: float = C.GRAD_CLIP
    max_steps: int | None = None
    hflip: bool = False            # random horizontal flips of each training pair
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        for name in ("lr", "lr_decay", "lr_step", "batch_size"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.weight_decay < 0 or self.grad_clip <= 0:
            raise ConfigError("weight_decay must be >= 0 and grad_clip > 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known and k != "model"}
        return cls(model=ModelConfig.from_dict(d.get("model", {})), **kw)


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Step schedule: ``lr * decay ** (epoch // step)``."""
    return cfg.lr * cfg.lr_decay ** (epoch // cfg.lr_step)


class AdamW:
    """Adam with decoupled weight decay, applied to a dict of named tensors."""

    def __init__(self, params: dict[str, Tensor], weight_decay: float = C.WEIGHT_DECAY,
                 betas=C.ADAM_BETAS, eps: float = C.ADAM_EPS):
        self.params = params
        self.wd = weight_decay
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data = (p.data * (1 - lr * self.wd) - lr * update).astype(p.data.dtype)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values())))
    if norm > max_norm:
        s = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * s
    return norm


@dataclass
class TrainResult:
    model: Model
    epoch_losses: list[float]
    step_losses: list[float]
    seconds: float = 0.0


def loss_and_grads(model: Model, q: np.ndarray, r: np.ndarray, targets):
    named = model.named_tensors()
    with GradTape() as tape:
        pred = forward_arrays(q, r, model.params, model.cfg)
        loss = total_loss(pred, targets)
        tape.backward(loss)
    return loss.item(), {k: t.grad for k, t in named.items()}


def train(samples, cfg: TrainConfig, anchors: AnchorSet | None = None,
          model: Model | None = None, on_epoch: Callable[[int, float], None] | None = None) -> TrainResult:
    """Fit a model; returns it with per-epoch mean losses and per-step losses."""
    samples = list(samples)
    if not samples:
        raise InputError("cannot train on an empty dataset")
    if model is None:
        if anchors is None:
            anchors = cluster_anchors([(s.gt_box.w, s.gt_box.h) for s in samples],
                                      cfg.model.num_anchors, seed=cfg.seed)
        model = Model.create(cfg.model, anchors, seed=cfg.seed)
    mcfg = model.cfg
    grid = _grid(mcfg)
    q_all, r_all = prepare_inputs(samples, mcfg)
    targets = [assign_target(s.gt_box, model.anchors, grid) for s in samples]
    if cfg.hflip:
        width = mcfg.reference_size
        flipped = [assign_target(BBox(width - s.gt_box.x, s.gt_box.y, s.gt_box.w, s.gt_box.h),
                                 model.anchors, grid) for s in samples]

    named = model.named_tensors()
    opt = AdamW(named, cfg.weight_decay)
    rng = np.random.default_rng(cfg.seed + 1)
    epoch_losses, step_losses = [], []
    start = time.perf_counter()
    steps = 0
    for epoch in range(cfg.epochs):
        lr = lr_at(epoch, cfg)
        order = rng.permutation(len(samples))
        batch_losses = []
        for b0 in range(0, len(order), cfg.batch_size):
            if cfg.max_steps is not None and steps >= cfg.max_steps:
                break
            idx = order[b0:b0 + cfg.batch_size]
            q, r = q_all[idx], r_all[idx]
            batch_targets = [targets[i] for i in idx]
            if cfg.hflip:
                flip = rng.random(len(idx)) < 0.5
                q = np.where(flip[:, None, None, None], q[..., ::-1], q)
                r = np.where(flip[:, None, None, None], r[..., ::-1], r)
                batch_targets = [flipped[i] if f else t for i, f, t in zip(idx, flip, batch_targets)]
            loss, grads = loss_and_grads(model, q, r, batch_targets)
            clip_by_global_norm(grads, cfg.grad_clip)
            opt.step(lr, grads)
            batch_losses.append(loss)
            step_losses.append(loss)
            steps += 1
        if not batch_losses:
            break
        epoch_losses.append(float(np.mean(batch_losses)))
        log.info("epoch %d lr %.2e loss %.4f", epoch, lr, epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, epoch_losses[-1])
    model.extra["train"] = cfg.to_dict()
    return TrainResult(model, epoch_losses, step_losses, time.perf_counter() - start)


def _grid(cfg: ModelConfig) -> GridSpec:
    rows, cols = cfg.ref_grid
    return GridSpec(rows, cols, float(cfg.stride))


def batch_loss(model: Model, samples) -> float:
    q, r = prepare_inputs(samples, model.cfg)
    grid = _grid(model.cfg)
    targets = [assign_target(s.gt_box, model.anchors, grid) for s in samples]
    return total_loss(forward_arrays(q, r, model.params, model.cfg), targets).item()


def _heatmap(pred: PredictionGrid) -> np.ndarray:
    f = pred.fields()
    logits = f[:, 4].max(axis=0)
    conf = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    lo, hi = conf.min(), conf.max()
    return np.zeros_like(conf) if hi <= lo else (conf - lo) / (hi - lo)


@dataclass
class Inference:
    box: object
    flat_index: int
    confidence: float
    heatmap: np.ndarray  # H_g x W_g in [0, 1]
    cell: tuple[int, int]  # (col, row)


def infer(sample, model: Model) -> Inference:
    pred = model.forward(sample)
    box, flat, conf = select_prediction(pred, model.anchors)
    g = pred.grid
    rest = flat % (g.rows * g.cols)
    row, col = divmod(rest, g.cols)
    return Inference(box, flat, conf, _heatmap(pred), (col, row))


def evaluate(model: Model, samples, batch_size: int = 32) -> EvalReport:
    samples = list(samples)
    if not samples:
        raise InputError("cannot evaluate an empty dataset")
    records = []
    for b0 in range(0, len(samples), batch_size):
        chunk = samples[b0:b0 + batch_size]
        pred = model.forward_batch(chunk)
        for i, s in enumerate(chunk):
            single = PredictionGrid(Tensor(pred.raw.data[i]), pred.cell_size)
            box, _, _ = select_prediction(single, model.anchors)
            records.append(EvalRecord(s.id, iou(box, s.gt_box)))
    return EvalReport.from_records(records)


MICRO_PIPELINE = dict(dim=8, heads=2, k=1, query_size=8, reference_size=16, channels=(4, 4, 8),
                      strides=(2, 1, 1, 1), dtype="float64")


def pipeline_grad_check(cfg: ModelConfig | None = None, seed: int = 0, eps: float = C.FD_EPS,
                        probes: int | None = 4) -> dict[str, float]:
    """Central-difference check of d(total_loss)/d(param) through the whole model.

    Returns the max relative error per parameter tensor, measured on
    ``probes`` random elements of each (all elements if ``None``). Biases
    start off zero so every path carries signal.
    """
    cfg = cfg or ModelConfig(**MICRO_PIPELINE)
    if cfg.np_dtype != np.float64:
        raise ConfigError("gradient checks need dtype float64")
    rng = np.random.default_rng(seed)
    anchors = AnchorSet(np.array([[3.0 + i, 4.0 + i / 2] for i in range(cfg.num_anchors)]))
    model = Model.create(cfg, anchors, seed=seed)
    named = model.named_tensors()
    for name, t in named.items():
        if t.ndim == 1:
            t.data = rng.uniform(-0.1, 0.1, t.shape)
    size = cfg.reference_size
    gt = BBox(size * 0.45, size * 0.55, size * 0.3, size * 0.4)
    targets = [assign_target(gt, anchors, _grid(cfg))]
    q = rng.uniform(0, 1, (1, 4, cfg.query_size, cfg.query_size))
    r = rng.uniform(0, 1, (1, 3, size, size))
    _, grads = loss_and_grads(model, q, r, targets)

    def loss_value():
        return total_loss(forward_arrays(q, r, model.params, cfg), targets).item()

    errors = {}
    for name, t in named.items():
        flat = t.data.reshape(-1)
        idx = np.arange(flat.size)
        if probes is not None and probes < flat.size:
            idx = rng.choice(flat.size, probes, replace=False)
        analytic = grads[name].reshape(-1)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            hi = loss_value()
            flat[i] = orig - eps
            lo = loss_value()
            flat[i] = orig
            numeric = (hi - lo) / (2 * eps)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(analytic[i])))
        errors[name] = worst
    return errors
