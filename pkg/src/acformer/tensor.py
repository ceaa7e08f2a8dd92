"""Tensor and tape for reverse-mode differentiation.

Operations only record onto a tape while one is active (``with Tape():``)
and at least one input requires a gradient. Outside a tape every op is a
plain float64 numpy computation, which is what evaluation and finite
differences use.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_local = threading.local()


class ShapeError(ValueError):
    """Operand shapes do not agree."""


class ConfigurationError(ValueError):
    """An operation was asked for a configuration it cannot honour."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up where finite values are required."""


class TapeError(RuntimeError):
    pass


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def current_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense float64 array with an optional gradient slot.

    ``tape_id`` is the index of the node that produced this tensor on its
    tape; leaves (user-created tensors, parameters) have ``tape_id is None``.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape_id", "_tape", "name")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape_id: int | None = None
        self._tape: Tape | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = np.asarray(arr, dtype=np.float64)
        t.requires_grad = False
        t.grad = None
        t.tape_id = None
        t._tape = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def copy(self) -> "Tensor":
        t = Tensor(self.data, requires_grad=self.requires_grad, name=self.name)
        return t

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return len(self.data)

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __radd__(self, other):
        from . import ops
        return ops.add(other, self)

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    def __rmul__(self, other):
        from . import ops
        return ops.mul(other, self)

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, exponent: float):
        from . import ops
        return ops.power(self, exponent)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))


def assert_finite(t: "Tensor | np.ndarray", where: str = "tensor") -> None:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    if not np.all(np.isfinite(arr)):
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{where}: {bad} non-finite value(s)")


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    backward_fn: BackwardFn


@dataclass
class Tape:
    """Ordered record of differentiable operations for one forward pass."""

    nodes: list[Node] = field(default_factory=list)
    closed: bool = False
    backward_calls: int = 0

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - mis-nested contexts
            stack.remove(self)

    def record(self, op: str, inputs: Sequence[Tensor], out: Tensor, backward_fn: BackwardFn) -> None:
        if self.closed:
            raise TapeError("cannot record onto a tape that has already been consumed by backward()")
        out.requires_grad = True
        out.tape_id = len(self.nodes)
        out._tape = self
        self.nodes.append(Node(op, tuple(inputs), backward_fn))

    def backward(self, loss: Tensor, retain: bool = False) -> None:
        """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every leaf on the tape.

        Nodes are visited in exact reverse recording order. With
        ``retain=False`` the tape is discarded afterwards.
        """
        if loss.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self or loss.tape_id is None:
            raise TapeError("loss was not recorded on this tape")
        if self.closed:
            raise TapeError("tape already consumed; use retain=True for repeated backward passes")
        self.backward_calls += 1
        grads: list[np.ndarray | None] = [None] * (loss.tape_id + 1)
        grads[loss.tape_id] = np.ones_like(loss.data)
        for idx in range(loss.tape_id, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            grads[idx] = None
            node = self.nodes[idx]
            in_grads = node.backward_fn(g)
            for inp, ig in zip(node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if inp._tape is self and inp.tape_id is not None:
                    j = inp.tape_id
                    grads[j] = ig if grads[j] is None else grads[j] + ig
                elif inp.tape_id is None:
                    if inp.grad is None:
                        inp.grad = np.array(ig, dtype=np.float64)
                    else:
                        inp.grad = inp.grad + ig
        if not retain:
            self.nodes = []
            self.closed = True


def backward(loss: Tensor, retain: bool = False) -> None:
    """Back-propagate from a scalar ``loss`` on whatever tape recorded it."""
    if loss.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise TapeError("loss is not on a tape; compute it inside `with Tape():` from tensors with requires_grad")
    loss._tape.backward(loss, retain=retain)


def zero_grad(tensors) -> None:
    for t in tensors:
        t.grad = None
