"""Dense tensor value and the reverse-mode gradient tape.

A :class:`Tensor` is a thin wrapper around a numpy array. Operations in
:mod:`cvgeoloc.numerics.ops` are pure; while a :class:`GradTape` is active
they additionally append a record (op name, inputs, output, backward closure)
to it. ``tape.backward(loss)`` replays the records in reverse and leaves one
accumulated gradient on every leaf tensor that requires one.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from ..errors import ContractError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    # Operator sugar; the ops module is imported lazily to avoid a cycle.
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


@dataclass
class TapeRecord:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


_ACTIVE: list["GradTape"] = []


def active_tape() -> "GradTape | None":
    return _ACTIVE[-1] if _ACTIVE else None


class GradTape:
    """Records differentiable ops executed inside its ``with`` block.

    One tape per training step; tapes are not thread-safe.
    """

    def __init__(self):
        self.records: list[TapeRecord] = []
        self._produced: set[int] = set()

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def record(self, op, inputs, output, backward):
        self.records.append(TapeRecord(op, tuple(inputs), output, backward))
        self._produced.add(id(output))

    def backward(self, loss: Tensor) -> None:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for rec in reversed(self.records):
            for t in rec.inputs:
                if t.requires_grad and id(t) not in self._produced:
                    leaves[id(t)] = t
            g = grads.pop(id(rec.output), None)
            if g is None:
                continue
            for t, gi in zip(rec.inputs, rec.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        for key, leaf in leaves.items():
            g = grads.get(key)
            leaf.grad = np.zeros_like(leaf.data) if g is None else g.reshape(leaf.shape)
        if loss.requires_grad and id(loss) not in self._produced:
            loss.grad = np.ones_like(loss.data)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)
