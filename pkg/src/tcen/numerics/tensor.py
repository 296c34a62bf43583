"""Tensors, parameters and the define-by-run differentiation tape."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from ..errors import NumericError

_ACTIVE: list["Tape"] = []


class Tensor:
    """Dense float64 array, optionally linked to the active tape."""

    __slots__ = ("data", "tape_id")

    def __init__(self, data: Any, tape_id: int | None = None):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.tape_id = tape_id

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, tracked={self.tape_id is not None})"

    # operator sugar; the heavy lifting is in ``primitives``
    def __add__(self, other):
        from .primitives import apply
        return apply("add", [self, as_tensor(other)])

    __radd__ = __add__

    def __sub__(self, other):
        from .primitives import apply
        return apply("add", [self, apply("mul", [as_tensor(other), Tensor(-1.0)])])

    def __rsub__(self, other):
        from .primitives import apply
        return apply("add", [as_tensor(other), apply("mul", [self, Tensor(-1.0)])])

    def __mul__(self, other):
        from .primitives import apply
        return apply("mul", [self, as_tensor(other)])

    __rmul__ = __mul__

    def __neg__(self):
        from .primitives import apply
        return apply("mul", [self, Tensor(-1.0)])

    def __matmul__(self, other):
        from .primitives import apply
        return apply("matmul", [self, as_tensor(other)])

    def __getitem__(self, key):
        from .primitives import apply
        return apply("slice", [self], key=key)


class Parameter(Tensor):
    """A trainable leaf tensor with a gradient accumulator of the same shape."""

    __slots__ = ("grad", "name")

    def __init__(self, data: Any, name: str = ""):
        super().__init__(np.array(data, dtype=np.float64))
        self.grad = np.zeros_like(self.data)
        self.name = name

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x: Any) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad[...] = 0.0


@dataclass
class Node:
    kind: str
    inputs: list[Tensor]
    output: Tensor
    saved: Any
    attrs: dict
    backward: Callable


@dataclass
class Tape:
    """Append-only record of primitive applications.

    Used as a context manager; operations run inside the block whose inputs
    are parameters or tape outputs get recorded.  Nodes are appended in
    execution order, so the list is already topologically sorted.
    """

    nodes: list[Node] = field(default_factory=list)

    def __post_init__(self):
        self.id = id(self)

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)

    def tracks(self, t: Tensor) -> bool:
        return isinstance(t, Parameter) or t.tape_id == self.id

    def record(self, node: Node) -> None:
        node.output.tape_id = self.id
        self.nodes.append(node)

    def gradients(self, loss: Tensor) -> dict[int, tuple[Parameter, np.ndarray]]:
        """Reverse sweep; returns ``{id(param): (param, dloss/dparam)}``."""
        if loss.data.size != 1 or loss.ndim != 0:
            raise NumericError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.tape_id != self.id:
            raise NumericError("loss is not recorded on this tape (detached)")
        grads: dict[int, np.ndarray] = {id(loss): np.ones(())}
        out: dict[int, tuple[Parameter, np.ndarray]] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g, [t.data for t in node.inputs],
                                     node.output.data, node.saved, node.attrs)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not self.tracks(t):
                    continue
                key = id(t)
                if isinstance(t, Parameter):
                    if key in out:
                        out[key][1].__iadd__(gi)
                    else:
                        out[key] = (t, np.array(gi, dtype=np.float64))
                elif key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
        return out

    def backward(self, loss: Tensor) -> None:
        for p, g in self.gradients(loss).values():
            p.grad += g


def backward(tape: Tape, loss: Tensor) -> None:
    """Accumulate ``dloss/dp`` into ``p.grad`` for every parameter on ``tape``."""
    tape.backward(loss)


def active_tape() -> Tape | None:
    return _ACTIVE[-1] if _ACTIVE else None


@contextlib.contextmanager
def no_tape():
    """Temporarily run without recording (inference, finite differences)."""
    saved = list(_ACTIVE)
    _ACTIVE.clear()
    try:
        yield
    finally:
        _ACTIVE.extend(saved)


def parameters_of(tensors: Sequence[Tensor]) -> list[Parameter]:
    return [t for t in tensors if isinstance(t, Parameter)]
