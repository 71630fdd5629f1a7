"""End-to-end pipeline: shared backbone -> fusion -> MHSAM -> anchor head.

Checkpoint format (``.npz``, numpy zip archive):

* ``param/<name>`` -- one array per named parameter tensor
* ``anchors``      -- ``9 x 2`` anchor (w, h) array
* ``meta``         -- JSON string ``{"format_version", "config", "extra"}``

Loading rejects any ``format_version`` other than :data:`CHECKPOINT_VERSION`.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import numerics as nx
from .attention import CVCAMConfig, CVCAMParams, cvcam_forward
from .config import (BACKBONE_CHANNELS, BACKBONE_STRIDES, BOX_PARAMS, CLICK_SIGMA, DEFAULT_EXPANSION,
                     DEFAULT_HEADS, DEFAULT_K, NUM_ANCHORS, QUERY_SIZE, REFERENCE_SIZE)
from .detection import AnchorSet, PredictionGrid
from .encoding import encode_click
from .errors import ConfigError, VersionError
from .mhsam import MHSAMParams, mhsam_forward
from .numerics import Tensor

CHECKPOINT_VERSION = 1

VARIANTS = {
    "baseline": ("sum", False),
    "cvcam": ("cvcam", False),
    "full": ("cvcam", True),
}


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    heads: int = DEFAULT_HEADS
    k: int = DEFAULT_K
    expansion: int = DEFAULT_EXPANSION
    share_weights: bool = True
    residual: bool = True
    fusion: str = "cvcam"          # "cvcam" or "sum"
    use_mhsam: bool = True
    feature_norm: bool = True
    query_size: int = QUERY_SIZE
    reference_size: int = REFERENCE_SIZE
    channels: tuple[int, ...] = BACKBONE_CHANNELS
    strides: tuple[int, ...] = BACKBONE_STRIDES
    num_anchors: int = NUM_ANCHORS
    click_sigma: float = CLICK_SIGMA
    dtype: str = "float32"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "strides", tuple(self.strides))
        if self.fusion not in ("cvcam", "sum"):
            raise ConfigError(f"unknown fusion {self.fusion!r}")
        if len(self.strides) != len(self.channels) + 1:
            raise ConfigError("need one stride per backbone stage (len(channels) + 1)")
        if self.reference_size % self.stride or self.query_size % self.stride:
            raise ConfigError(f"image sizes must be divisible by the feature stride {self.stride}")
        self.cvcam  # validates k / heads / dim

    @classmethod
    def variant(cls, name: str, **kw) -> "ModelConfig":
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}")
        fusion, mhsam = VARIANTS[name]
        return cls(fusion=fusion, use_mhsam=mhsam, **kw)

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))

    @property
    def cvcam(self) -> CVCAMConfig:
        return CVCAMConfig(self.k, self.heads, self.dim, self.share_weights, self.residual)

    @property
    def ref_grid(self) -> tuple[int, int]:
        g = self.reference_size // self.stride
        return g, g

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class BackboneParams:
    """Plain conv stack shared by both branches. The query branch's first
    layer also sees the click channel through the extra ``click_w`` slice."""
    weights: list[Tensor]
    biases: list[Tensor]
    click_w: Tensor

    @classmethod
    def init(cls, rng, cfg: ModelConfig):
        dt = cfg.np_dtype
        chans = (3,) + cfg.channels + (cfg.dim,)
        ws, bs = [], []
        for cin, cout in zip(chans[:-1], chans[1:]):
            fan_in = (cin + 1 if not ws else cin) * 9
            ws.append(nx.uniform_fan_in(rng, (cout, cin, 3, 3), fan_in, dt))
            bs.append(nx.zeros((cout,), dt))
        click = nx.uniform_fan_in(rng, (chans[1], 1, 3, 3), 4 * 9, dt)
        return cls(ws, bs, click)

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.click_w": self.click_w}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            out[f"{prefix}.s{i}.w"] = w
            out[f"{prefix}.s{i}.b"] = b
        return out


@dataclass
class ModelParams:
    backbone: BackboneParams
    cvcam: CVCAMParams | None
    mhsam: MHSAMParams | None
    head_w: Tensor
    head_b: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        dt = cfg.np_dtype
        backbone = BackboneParams.init(rng, cfg)
        cvcam = CVCAMParams.init(rng, cfg.cvcam, dt) if cfg.fusion == "cvcam" else None
        mhsam = MHSAMParams.init(rng, cfg.dim, cfg.expansion, dt) if cfg.use_mhsam else None
        out_ch = cfg.num_anchors * BOX_PARAMS
        head_w = nx.uniform_fan_in(rng, (out_ch, cfg.dim, 1, 1), cfg.dim, dt)
        return cls(backbone, cvcam, mhsam, head_w, nx.zeros((out_ch,), dt))

    def named(self) -> dict[str, Tensor]:
        out = self.backbone.named("backbone")
        if self.cvcam is not None:
            out.update(self.cvcam.named("cvcam"))
        if self.mhsam is not None:
            out.update(self.mhsam.named("mhsam"))
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out


def backbone_forward(x: Tensor, params: BackboneParams, cfg: ModelConfig, query: bool) -> Tensor:
    n_stages = len(params.weights)
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        if i == 0 and query:
            w = nx.concat([w, params.click_w], axis=1)
        x = nx.conv2d(x, w, b, stride=cfg.strides[i], pad=1)
        if i < n_stages - 1:
            x = nx.relu(x)
    return x


def channel_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardize every position's channel vector (zero mean, unit variance)."""
    centered = nx.sub(x, nx.mean(x, axis=-3, keepdims=True))
    var = nx.mean(nx.mul(centered, centered), axis=-3, keepdims=True)
    return nx.mul(centered, nx.power(nx.add(var, eps), -0.5))


def sum_fusion(f_q: Tensor, f_r: Tensor) -> Tensor:
    """Baseline fusion: spatially averaged query feature added at every reference cell."""
    return nx.add(f_r, nx.mean(f_q, axis=(-2, -1), keepdims=True))


def forward_arrays(query: np.ndarray, reference: np.ndarray, params: ModelParams,
                   cfg: ModelConfig) -> PredictionGrid:
    """Batched forward pass on prepared ``N x 4 x H_q x W_q`` / ``N x 3 x H_r x W_r`` inputs."""
    q = query if isinstance(query, Tensor) else Tensor(query)
    r = reference if isinstance(reference, Tensor) else Tensor(reference)
    f_q = backbone_forward(q, params.backbone, cfg, query=True)
    f_r = backbone_forward(r, params.backbone, cfg, query=False)
    if cfg.feature_norm:
        f_q, f_r = channel_norm(f_q), channel_norm(f_r)
    if cfg.fusion == "cvcam":
        fused = cvcam_forward(f_q, f_r, cfg.cvcam, params.cvcam).tensor
    else:
        fused = sum_fusion(f_q, f_r)
    if cfg.use_mhsam:
        fused = mhsam_forward(fused, params.mhsam)
    raw = nx.conv2d(fused, params.head_w, params.head_b)
    return PredictionGrid(raw, float(cfg.stride))


def prepare_inputs(samples, cfg: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into query (RGB + click channel) and reference arrays."""
    qs, rs = [], []
    for s in samples:
        _, hq, wq = s.query_image.shape
        _, hr, wr = s.reference_image.shape
        if (hq, wq) != (cfg.query_size,) * 2 or (hr, wr) != (cfg.reference_size,) * 2:
            raise ConfigError(
                f"sample {s.id}: images {wq}x{hq} / {wr}x{hr} do not match configured "
                f"{cfg.query_size} / {cfg.reference_size}")
        click = encode_click(s.click, hq, wq, cfg.click_sigma).channel
        qs.append(np.concatenate([s.query_image, click], axis=0))
        rs.append(s.reference_image)
    dt = cfg.np_dtype
    return np.stack(qs).astype(dt), np.stack(rs).astype(dt)


@dataclass
class Model:
    cfg: ModelConfig
    params: ModelParams
    anchors: AnchorSet
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg: ModelConfig, anchors: AnchorSet, seed: int = 0) -> "Model":
        if len(anchors) != cfg.num_anchors:
            raise ConfigError(f"model expects {cfg.num_anchors} anchors, got {len(anchors)}")
        return cls(cfg, ModelParams.init(cfg, seed), anchors)

    def forward_batch(self, samples) -> PredictionGrid:
        q, r = prepare_inputs(samples, self.cfg)
        return forward_arrays(q, r, self.params, self.cfg)

    def forward(self, sample) -> PredictionGrid:
        """Single-sample forward; ``raw`` is ``45 x H_g x W_g``."""
        pred = self.forward_batch([sample])
        return PredictionGrid(Tensor(pred.raw.data[0]), pred.cell_size)

    def named_tensors(self) -> dict[str, Tensor]:
        return self.params.named()

    def with_config(self, **changes) -> "Model":
        return Model(replace(self.cfg, **changes), self.params, self.anchors, dict(self.extra))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        meta = {"format_version": CHECKPOINT_VERSION, "config": self.cfg.to_dict(), "extra": self.extra}
        arrays = {f"param/{k}": t.data for k, t in self.named_tensors().items()}
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), anchors=self.anchors.anchors, **arrays)
        return path

    @classmethod
    def load(cls, path) -> "Model":
        with np.load(path, allow_pickle=False) as z:
            try:
                meta = json.loads(str(z["meta"]))
            except KeyError:
                raise VersionError(f"{path}: not a checkpoint (no meta record)") from None
            version = meta.get("format_version")
            if version != CHECKPOINT_VERSION:
                raise VersionError(f"{path}: checkpoint format {version}, expected {CHECKPOINT_VERSION}")
            cfg = ModelConfig.from_dict(meta["config"])
            model = cls(cfg, ModelParams.init(cfg), AnchorSet(z["anchors"]), meta.get("extra", {}))
            for name, t in model.named_tensors().items():
                key = f"param/{name}"
                if key not in z.files:
                    raise VersionError(f"{path}: missing tensor {name}")
                t.data = z[key].astype(cfg.np_dtype)
        return model
