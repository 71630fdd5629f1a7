"""Differentiable primitives with analytic backward passes.

Every op accepts :class:`Tensor` (or array-like constants), computes its
result eagerly with numpy and, when a :class:`GradTape` is active and some
input requires a gradient, records a closure mapping the output gradient to
input gradients.

Image ops take ``C x H x W`` or batched ``N x C x H x W`` inputs.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import ShapeError
from .tensor import Tensor, active_tape


def _wrap(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(op: str, data: np.ndarray, inputs, backward) -> Tensor:
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(op, inputs, out, backward)
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(op, a: Tensor, b: Tensor):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are incompatible") from None


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast("add", a, b)
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast("sub", a, b)
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (unbroadcast(g, sa), unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    """Elementwise (Hadamard) product."""
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    _check_broadcast("mul", a, b)
    ad, bd = a.data, b.data
    return _make("mul", ad * bd, (a, b),
                 lambda g: (unbroadcast(g * bd, ad.shape), unbroadcast(g * ad, bd.shape)))


elementwise_mul = mul


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make("relu", x.data * mask, (x,), lambda g: (g * mask,))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # Split by sign so exp never overflows.
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)
    return _make("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def exp(x: Tensor) -> Tensor:
    e = np.exp(x.data)
    return _make("exp", e, (x,), lambda g: (g * e,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make("log", np.log(xd), (x,), lambda g: (g / xd,))


def power(x: Tensor, p: float) -> Tensor:
    xd = x.data
    return _make("power", xd ** p, (x,), lambda g: (g * p * xd ** (p - 1),))


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    xd = x.data
    out = np.clip(xd, lo, hi)
    inside = np.ones(xd.shape, dtype=bool)
    if lo is not None:
        inside &= xd >= lo
    if hi is not None:
        inside &= xd <= hi
    return _make("clamp", out, (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions

def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", x.data.sum(axis=axis, keepdims=keepdims), (x,), backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape
    if axis is None:
        count = x.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        count = int(np.prod([shape[a] for a in axes]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _make("mean", x.data.mean(axis=axis, keepdims=keepdims), (x,), backward)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax: axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make("softmax", s, (x,), backward)


# ---------------------------------------------------------------- structure

def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast like ``numpy.matmul``."""
    a = _wrap(a, b if isinstance(b, Tensor) else None)
    b = _wrap(b, a)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        da = g @ np.swapaxes(bd, -1, -2)
        db = np.swapaxes(ad, -1, -2) @ g
        return unbroadcast(da, ad.shape), unbroadcast(db, bd.shape)

    return _make("matmul", ad @ bd, (a, b), backward)


def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes) -> Tensor:
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(x.data, axes), (x,),
                 lambda g: (np.transpose(g, inv),))


def concat(xs, axis: int = 0) -> Tensor:
    xs = [_wrap(t) for t in xs]
    sizes = [t.shape[axis] for t in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make("concat", np.concatenate([t.data for t in xs], axis=axis), tuple(xs), backward)


def take(x: Tensor, index) -> Tensor:
    """Advanced indexing ``x[index]`` with scatter-add backward."""
    shape = x.shape

    def backward(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, index, g)
        return (out,)

    return _make("take", x.data[index], (x,), backward)


# ---------------------------------------------------------------- convolution

def _batched(x: Tensor) -> bool:
    if x.ndim == 4:
        return True
    if x.ndim == 3:
        return False
    raise ShapeError(f"expected C x H x W or N x C x H x W input, got {x.shape}")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation with a ``C_out x C_in x k x k`` kernel."""
    batched = _batched(x)
    xd = x.data if batched else x.data[None]
    n, c, h, wd = xd.shape
    co, ci, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ci} ({x.shape} vs {w.shape})")
    if kh > h + 2 * pad or kw > wd + 2 * pad:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{wd} (pad {pad})")
    if pad:
        xd = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho = (xd.shape[2] - kh) // stride + 1
    wo = (xd.shape[3] - kw) // stride + 1
    win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    wmat = w.data.reshape(co, -1)
    out = (cols @ wmat.T).reshape(n, ho, wo, co).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)
    padded_shape = xd.shape

    def backward(g):
        g4 = g if batched else g[None]
        gmat = g4.transpose(0, 2, 3, 1).reshape(n * ho * wo, co)
        dw = (gmat.T @ cols).reshape(w.shape)
        dcols = (gmat @ wmat).reshape(n, ho, wo, c, kh, kw)
        dx = np.zeros(padded_shape, dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                    dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        if pad:
            dx = dx[:, :, pad:-pad, pad:-pad]
        if not batched:
            dx = dx[0]
        db = None if bias is None else g4.sum(axis=(0, 2, 3))
        return dx, dw, db

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make("conv2d", out if batched else out[0], inputs,
                 lambda g: backward(g)[:len(inputs)])


def deconv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """Transposed convolution with a ``C_in x C_out x k x k`` kernel.

    The adjoint of :func:`conv2d` with the same kernel, stride and padding:
    an ``H' x W'`` input maps to ``(H'-1)*stride + k - 2*pad`` per axis.
    """
    batched = _batched(x)
    xd = x.data if batched else x.data[None]
    n, c, h, wd = xd.shape
    ci, co, kh, kw = w.shape
    if ci != c:
        raise ShapeError(f"deconv2d: input has {c} channels, kernel expects {ci} ({x.shape} vs {w.shape})")
    hf = (h - 1) * stride + kh
    wf = (wd - 1) * stride + kw
    if hf - 2 * pad < 1 or wf - 2 * pad < 1:
        raise ShapeError(f"deconv2d: padding {pad} consumes the whole {hf}x{wf} output")
    xmat = xd.transpose(0, 2, 3, 1).reshape(n * h * wd, c)
    wmat = w.data.reshape(ci, co * kh * kw)
    contrib = (xmat @ wmat).reshape(n, h, wd, co, kh, kw)
    full = np.zeros((n, co, hf, wf), dtype=contrib.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + stride * h:stride, j:j + stride * wd:stride] += \
                contrib[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    out = full[:, :, pad:hf - pad, pad:wf - pad]
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def backward(g):
        g4 = g if batched else g[None]
        gfull = np.pad(g4, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else g4
        win = sliding_window_view(gfull, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :h, :wd]
        gcols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * wd, co * kh * kw)
        dx = (gcols @ wmat.T).reshape(n, h, wd, c).transpose(0, 3, 1, 2)
        dw = (xmat.T @ gcols).reshape(w.shape)
        if not batched:
            dx = dx[0]
        db = None if bias is None else g4.sum(axis=(0, 2, 3))
        return np.ascontiguousarray(dx), dw, db

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make("deconv2d", out if batched else out[0], inputs,
                 lambda g: backward(g)[:len(inputs)])
