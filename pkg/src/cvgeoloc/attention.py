"""Cross-attention block (CAB) and the cross-view cross-attention module.

Features travel flattened as ``D x L`` (or ``N x D x L``) where ``L = H*W``.
A CAB takes queries from its first input and keys/values from its second:

    Q = W_Q (f1 + pe1),  K = W_K (f2 + pe2),  V = W_V f2
    Scores = softmax(Q^T K / sqrt(D/m))           per head
    out    = rearrange(Scores V^T)                -> D x L1

Positional encodings reach Q and K only, never V.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import DEFAULT_HEADS, DEFAULT_K, SIMULTANEOUS_UPDATE
from .encoding import PosEnc2D, build_posenc
from .errors import ConfigError, ShapeError
from .numerics import Tensor


@dataclass
class CABParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    heads: int = 1

    def __post_init__(self):
        d = self.w_q.shape[0]
        for w in (self.w_q, self.w_k, self.w_v):
            if w.shape != (d, d):
                raise ShapeError(f"CAB projections must be square D x D, got {w.shape}")
        if self.heads < 1 or d % self.heads:
            raise ConfigError(f"channel dim {d} not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.w_q.shape[0]

    @classmethod
    def init(cls, rng: np.random.Generator, dim: int, heads: int, dtype=np.float64):
        ws = [nx.uniform_fan_in(rng, (dim, dim), dim, dtype) for _ in range(3)]
        return cls(*ws, heads=heads)

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k, f"{prefix}.w_v": self.w_v}


@dataclass(frozen=True)
class CVCAMConfig:
    k: int = DEFAULT_K
    heads: int = DEFAULT_HEADS
    dim: int = 256
    share_weights: bool = True
    residual: bool = True

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError(f"CVCAM needs k >= 1 interaction iterations, got {self.k}")
        if self.heads < 1 or self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by {self.heads} heads")
        if self.dim % 4:
            raise ConfigError(f"dim {self.dim} must be a multiple of 4 for positional encoding")


@dataclass
class CVCAMParams:
    """``to_q[i]`` updates the query side (queries from F_q), ``to_r[i]`` the
    reference side; a single entry each when weights are shared."""
    to_q: list[CABParams]
    to_r: list[CABParams]
    fuse: CABParams

    @classmethod
    def init(cls, rng: np.random.Generator, cfg: CVCAMConfig, dtype=np.float64):
        n = 1 if cfg.share_weights else cfg.k
        to_q = [CABParams.init(rng, cfg.dim, cfg.heads, dtype) for _ in range(n)]
        to_r = [CABParams.init(rng, cfg.dim, cfg.heads, dtype) for _ in range(n)]
        return cls(to_q, to_r, CABParams.init(rng, cfg.dim, cfg.heads, dtype))

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for i, p in enumerate(self.to_q):
            out.update(p.named(f"{prefix}.to_q{i}"))
        for i, p in enumerate(self.to_r):
            out.update(p.named(f"{prefix}.to_r{i}"))
        out.update(self.fuse.named(f"{prefix}.fuse"))
        return out


@dataclass
class FusedFeature:
    tensor: Tensor  # C x H_r x W_r (or batched)

    @property
    def spatial(self) -> tuple[int, int]:
        return self.tensor.shape[-2:]


def _pe_flat(pe, like: Tensor):
    if pe is None:
        return None
    arr = pe.flat() if isinstance(pe, PosEnc2D) else np.asarray(pe)
    if arr.shape != like.shape[-2:]:
        raise ShapeError(f"positional encoding {arr.shape} does not match features {like.shape}")
    return arr.astype(like.dtype)


def _cab(f1: Tensor, f2: Tensor, params: CABParams, pe1=None, pe2=None):
    if f1.ndim not in (2, 3) or f2.ndim != f1.ndim:
        raise ShapeError(f"CAB inputs must both be D x L or N x D x L, got {f1.shape} and {f2.shape}")
    d = params.dim
    if f1.shape[-2] != d or f2.shape[-2] != d:
        raise ShapeError(f"CAB channel mismatch: f1 {f1.shape}, f2 {f2.shape}, weights D={d}")
    unbatched = f1.ndim == 2
    if unbatched:
        f1 = nx.reshape(f1, (1,) + f1.shape)
        f2 = nx.reshape(f2, (1,) + f2.shape)
    n, _, l1 = f1.shape
    l2 = f2.shape[2]
    m = params.heads
    dh = d // m

    p1 = _pe_flat(pe1, f1)
    p2 = _pe_flat(pe2, f2)
    q = nx.matmul(params.w_q, f1 if p1 is None else nx.add(f1, p1))
    k = nx.matmul(params.w_k, f2 if p2 is None else nx.add(f2, p2))
    v = nx.matmul(params.w_v, f2)

    qh = nx.transpose(nx.reshape(q, (n, m, dh, l1)), (0, 1, 3, 2))   # N m L1 dh
    kh = nx.reshape(k, (n, m, dh, l2))                               # N m dh L2
    vh = nx.transpose(nx.reshape(v, (n, m, dh, l2)), (0, 1, 3, 2))   # N m L2 dh
    scores = nx.softmax(nx.scale(nx.matmul(qh, kh), 1.0 / np.sqrt(dh)), axis=-1)
    out = nx.matmul(scores, vh)                                      # N m L1 dh
    out = nx.reshape(nx.transpose(out, (0, 1, 3, 2)), (n, d, l1))
    if unbatched:
        out = nx.reshape(out, (d, l1))
        scores = nx.reshape(scores, scores.shape[1:])
    return out, scores


def cab_forward(f1: Tensor, f2: Tensor, params: CABParams, pe1=None, pe2=None) -> Tensor:
    """Cross-attention of ``f1`` (queries) over ``f2`` (keys/values)."""
    return _cab(f1, f2, params, pe1, pe2)[0]


def cab_scores(f1: Tensor, f2: Tensor, params: CABParams, pe1=None, pe2=None) -> Tensor:
    """Per-head attention weights, ``m x L1 x L2`` (or ``N x m x L1 x L2``)."""
    return _cab(f1, f2, params, pe1, pe2)[1]


def _block(f1, f2, params, pe1, pe2, residual: bool) -> Tensor:
    out = cab_forward(f1, f2, params, pe1, pe2)
    return nx.add(f1, out) if residual else out


def cvcam_interact(f_q: Tensor, f_r: Tensor, cfg: CVCAMConfig, params: CVCAMParams,
                   pe_q=None, pe_r=None) -> tuple[Tensor, Tensor]:
    if cfg.k < 1:
        raise ConfigError(f"CVCAM needs k >= 1, got {cfg.k}")
    for i in range(cfg.k):
        pq = params.to_q[0 if cfg.share_weights else i]
        pr = params.to_r[0 if cfg.share_weights else i]
        new_q = _block(f_q, f_r, pq, pe_q, pe_r, cfg.residual)
        src = f_q if SIMULTANEOUS_UPDATE else new_q
        new_r = _block(f_r, src, pr, pe_r, pe_q, cfg.residual)
        f_q, f_r = new_q, new_r
    return f_q, f_r


def cvcam_fuse(fq_prime: Tensor, fr_prime: Tensor, params: CABParams, ref_hw: tuple[int, int],
               pe_q=None, pe_r=None, residual: bool = True) -> FusedFeature:
    """Fusion CAB: reference tokens query the query-view tokens, so the
    result keeps the reference grid ``C x H_r x W_r``."""
    h, w = ref_hw
    if fr_prime.shape[-1] != h * w:
        raise ShapeError(f"reference tokens {fr_prime.shape[-1]} != {h}x{w}")
    out = _block(fr_prime, fq_prime, params, pe_r, pe_q, residual)
    return FusedFeature(nx.reshape(out, out.shape[:-1] + (h, w)))


def cvcam_forward(f_q: Tensor, f_r: Tensor, cfg: CVCAMConfig, params: CVCAMParams) -> FusedFeature:
    """Run interaction and fusion on ``C x H x W`` maps (batched or not)."""
    hq, wq = f_q.shape[-2:]
    hr, wr = f_r.shape[-2:]
    pe_q = build_posenc(cfg.dim, hq, wq)
    pe_r = build_posenc(cfg.dim, hr, wr)
    fq = nx.reshape(f_q, f_q.shape[:-2] + (hq * wq,))
    fr = nx.reshape(f_r, f_r.shape[:-2] + (hr * wr,))
    fq, fr = cvcam_interact(fq, fr, cfg, params, pe_q, pe_r)
    return cvcam_fuse(fq, fr, params.fuse, (hr, wr), pe_q, pe_r, cfg.residual)
