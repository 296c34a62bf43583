"""Primitive catalog: forward rules, reverse rules and shape contracts.

Every primitive is registered under a string kind and receives/returns plain
numpy arrays; :func:`apply` wraps them into :class:`Tensor` objects and
records a node on the active tape when any input is tracked.

Shape contracts (``B`` = any leading batch dims):

=============  ==============================================================
matmul         (..., m, k) @ (..., k, n), numpy broadcasting on batch dims
add, mul       numpy broadcasting
concat         equal shapes except along ``axis``
stack          identical shapes
slice          any numpy basic-indexing key
reshape        same total size
transpose      swaps the last two axes
tanh/sigmoid/relu/exp     elementwise
log_softmax/softmax       along ``axis`` (default last)
logsumexp      reduces ``axis`` (default last)
embedding      table (V, d) with integer ``indices`` attr, all ``< V``
dropout        any; ``p`` in [0, 1) and a ``rng`` (numpy Generator)
sum, mean      over ``axis`` (None = all)
gather         ``take_along_axis`` with integer ``index`` attr
lstm, lstm_cell  see :mod:`tcen.numerics.recurrent`
=============  ==============================================================
"""

from __future__ import annotations

from typing import Any, Callable, Sequence

import numpy as np

from ..errors import ShapeError
from .tensor import Node, Tensor, active_tape, as_tensor

# log(0) stand-in used by lattice code; finite so that 0 * NEG == 0
NEG = -1e300


class Primitive:
    def __init__(self, kind: str, forward: Callable, backward: Callable,
                 check: Callable | None = None):
        self.kind = kind
        self.forward = forward
        self.backward = backward
        self.check = check


PRIMITIVES: dict[str, Primitive] = {}


def register(kind: str, check: Callable | None = None):
    def deco(cls):
        PRIMITIVES[kind] = Primitive(kind, cls.forward, cls.backward, check)
        return cls
    return deco


def apply(kind: str, inputs: Sequence[Any], **attrs) -> Tensor:
    """Run primitive ``kind`` on ``inputs``; record it if any input is tracked."""
    try:
        prim = PRIMITIVES[kind]
    except KeyError:
        raise ShapeError(kind, "unknown primitive kind") from None
    tensors = [as_tensor(t) for t in inputs]
    arrays = [t.data for t in tensors]
    if prim.check is not None:
        prim.check(kind, arrays, attrs)
    out, saved = prim.forward(arrays, attrs)
    result = Tensor(out)
    tape = active_tape()
    if tape is not None and any(tape.tracks(t) for t in tensors):
        tape.record(Node(kind, tensors, result, saved, attrs, prim.backward))
    return result


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (reverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------- checks

def _check_broadcast(kind, arrays, attrs):
    try:
        np.broadcast_shapes(*(a.shape for a in arrays))
    except ValueError:
        raise ShapeError(kind, f"cannot broadcast shapes {[a.shape for a in arrays]}") from None


def _check_matmul(kind, arrays, attrs):
    a, b = arrays
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(kind, f"operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(kind, f"inner dims differ: {a.shape} @ {b.shape} ({a.shape[-1]} != {b.shape[-2]})")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(kind, f"batch dims differ: {a.shape} @ {b.shape}") from None


def _check_concat(kind, arrays, attrs):
    axis = attrs.get("axis", -1)
    ref = arrays[0]
    for a in arrays[1:]:
        if a.ndim != ref.ndim:
            raise ShapeError(kind, f"rank mismatch {ref.shape} vs {a.shape}")
        for d in range(ref.ndim):
            if d != axis % ref.ndim and a.shape[d] != ref.shape[d]:
                raise ShapeError(kind, f"dim {d} differs: {ref.shape} vs {a.shape}")


def _check_stack(kind, arrays, attrs):
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ShapeError(kind, f"all inputs need one shape, got {sorted(shapes)}")


def _check_embedding(kind, arrays, attrs):
    (table,) = arrays
    idx = np.asarray(attrs["indices"])
    if table.ndim != 2:
        raise ShapeError(kind, f"table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(kind, f"index out of range for table with {table.shape[0]} rows")


def _check_reshape(kind, arrays, attrs):
    (x,) = arrays
    if int(np.prod(attrs["shape"])) != x.size and -1 not in attrs["shape"]:
        raise ShapeError(kind, f"cannot reshape {x.shape} to {attrs['shape']}")


def _check_gather(kind, arrays, attrs):
    (x,) = arrays
    idx = attrs["index"]
    axis = attrs.get("axis", -1)
    if idx.ndim != x.ndim:
        raise ShapeError(kind, f"index rank {idx.ndim} != input rank {x.ndim}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[axis]):
        raise ShapeError(kind, f"index out of range for axis of size {x.shape[axis]}")


def _check_dropout(kind, arrays, attrs):
    p = attrs.get("p", 0.0)
    if not 0.0 <= p < 1.0:
        raise ShapeError(kind, f"rate must be in [0, 1), got {p}")
    if p > 0 and attrs.get("rng") is None:
        raise ShapeError(kind, "dropout requires a seeded random source")


# ---------------------------------------------------------------- arithmetic

@register("matmul", _check_matmul)
class _MatMul:
    @staticmethod
    def forward(ins, attrs):
        return np.matmul(ins[0], ins[1]), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        a, b = ins
        if b.ndim == 2 and a.ndim > 2:
            ga = g @ b.T
            gb = a.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            return [ga, gb]
        ga = unbroadcast(np.matmul(g, np.swapaxes(b, -1, -2)), a.shape)
        gb = unbroadcast(np.matmul(np.swapaxes(a, -1, -2), g), b.shape)
        return [ga, gb]


@register("add", _check_broadcast)
class _Add:
    @staticmethod
    def forward(ins, attrs):
        return ins[0] + ins[1], None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        return [unbroadcast(g, ins[0].shape), unbroadcast(g, ins[1].shape)]


@register("mul", _check_broadcast)
class _Mul:
    @staticmethod
    def forward(ins, attrs):
        return ins[0] * ins[1], None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        a, b = ins
        return [unbroadcast(g * b, a.shape), unbroadcast(g * a, b.shape)]


@register("concat", _check_concat)
class _Concat:
    @staticmethod
    def forward(ins, attrs):
        axis = attrs.get("axis", -1)
        sizes = [a.shape[axis] for a in ins]
        return np.concatenate(ins, axis=axis), np.cumsum(sizes)[:-1]

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        return np.split(g, saved, axis=attrs.get("axis", -1))


@register("stack", _check_stack)
class _Stack:
    @staticmethod
    def forward(ins, attrs):
        return np.stack(ins, axis=attrs.get("axis", 0)), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        axis = attrs.get("axis", 0)
        return [np.take(g, i, axis=axis) for i in range(len(ins))]


@register("slice")
class _Slice:
    @staticmethod
    def forward(ins, attrs):
        return ins[0][attrs["key"]], None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        full = np.zeros_like(ins[0])
        key = attrs["key"]
        if _is_basic(key):
            full[key] = g
        else:
            np.add.at(full, key, g)
        return [full]


def _is_basic(key) -> bool:
    parts = key if isinstance(key, tuple) else (key,)
    return all(k is None or k is Ellipsis or isinstance(k, (int, np.integer, slice)) for k in parts)


@register("transpose")
class _Transpose:
    """Swap the last two axes."""

    @staticmethod
    def forward(ins, attrs):
        return np.swapaxes(ins[0], -1, -2), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        return [np.swapaxes(g, -1, -2)]


@register("reshape", _check_reshape)
class _Reshape:
    @staticmethod
    def forward(ins, attrs):
        return ins[0].reshape(attrs["shape"]), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        return [g.reshape(ins[0].shape)]


# ---------------------------------------------------------------- elementwise

@register("tanh")
class _Tanh:
    @staticmethod
    def forward(ins, attrs):
        return np.tanh(ins[0]), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        return [g * (1.0 - out * out)]


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: same function, no overflow for large |x|
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@register("sigmoid")
class _Sigmoid:
    @staticmethod
    def forward(ins, attrs):
        return _sigmoid(ins[0]), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        return [g * out * (1.0 - out)]


@register("relu")
class _Relu:
    @staticmethod
    def forward(ins, attrs):
        return np.maximum(ins[0], 0.0), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        return [g * (ins[0] > 0)]


@register("exp")
class _Exp:
    @staticmethod
    def forward(ins, attrs):
        return np.exp(ins[0]), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        return [g * out]


# ---------------------------------------------------------------- normalizers

def _lse(x: np.ndarray, axis: int, keepdims: bool = False) -> np.ndarray:
    m = np.max(x, axis=axis, keepdims=True)
    s = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    return s if keepdims else np.squeeze(s, axis=axis)


@register("log_softmax")
class _LogSoftmax:
    @staticmethod
    def forward(ins, attrs):
        axis = attrs.get("axis", -1)
        return ins[0] - _lse(ins[0], axis, keepdims=True), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        axis = attrs.get("axis", -1)
        return [g - np.exp(out) * g.sum(axis=axis, keepdims=True)]


@register("softmax")
class _Softmax:
    @staticmethod
    def forward(ins, attrs):
        axis = attrs.get("axis", -1)
        return np.exp(ins[0] - _lse(ins[0], axis, keepdims=True)), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        axis = attrs.get("axis", -1)
        return [out * (g - (g * out).sum(axis=axis, keepdims=True))]


@register("logsumexp")
class _LogSumExp:
    @staticmethod
    def forward(ins, attrs):
        return _lse(ins[0], attrs.get("axis", -1)), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        axis = attrs.get("axis", -1)
        w = np.exp(ins[0] - np.expand_dims(out, axis))
        return [np.expand_dims(g, axis) * w]


# ---------------------------------------------------------------- indexing / reductions

@register("embedding", _check_embedding)
class _Embedding:
    @staticmethod
    def forward(ins, attrs):
        return ins[0][np.asarray(attrs["indices"])], None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        full = np.zeros_like(ins[0])
        idx = np.asarray(attrs["indices"]).reshape(-1)
        np.add.at(full, idx, g.reshape(idx.size, -1))
        return [full]


@register("gather", _check_gather)
class _Gather:
    @staticmethod
    def forward(ins, attrs):
        return np.take_along_axis(ins[0], attrs["index"], axis=attrs.get("axis", -1)), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        axis = attrs.get("axis", -1) % ins[0].ndim
        full = np.zeros_like(ins[0])
        idx = attrs["index"]
        # scatter-add along axis; build full open-mesh indices
        grids = list(np.ix_(*[np.arange(n) for n in idx.shape]))
        grids[axis] = idx
        np.add.at(full, tuple(grids), g)
        return [full]


@register("sum")
class _Sum:
    @staticmethod
    def forward(ins, attrs):
        return np.sum(ins[0], axis=attrs.get("axis")), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        axis = attrs.get("axis")
        if axis is not None:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g, ins[0].shape).copy()]


@register("mean")
class _Mean:
    @staticmethod
    def forward(ins, attrs):
        return np.mean(ins[0], axis=attrs.get("axis")), None

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        axis = attrs.get("axis")
        n = ins[0].size if axis is None else ins[0].shape[axis]
        if axis is not None:
            g = np.expand_dims(g, axis)
        return [np.broadcast_to(g / n, ins[0].shape).copy()]


@register("dropout", _check_dropout)
class _Dropout:
    """Inverted dropout: kept units are scaled by 1/(1-p) at train time."""

    @staticmethod
    def forward(ins, attrs):
        p = attrs.get("p", 0.0)
        if p == 0.0:
            return ins[0].copy(), None
        mask = (attrs["rng"].random(ins[0].shape) >= p) / (1.0 - p)
        return ins[0] * mask, mask

    @staticmethod
    def backward(g, ins, out, saved, attrs):
        return [g if saved is None else g * saved]


# ---------------------------------------------------------------- functional sugar

def matmul(a, b): return apply("matmul", [a, b])
def add(a, b): return apply("add", [a, b])
def mul(a, b): return apply("mul", [a, b])
def tanh(x): return apply("tanh", [x])
def sigmoid(x): return apply("sigmoid", [x])
def relu(x): return apply("relu", [x])
def exp(x): return apply("exp", [x])
def concat(xs, axis=-1): return apply("concat", list(xs), axis=axis)
def stack(xs, axis=0): return apply("stack", list(xs), axis=axis)
def reshape(x, shape): return apply("reshape", [x], shape=tuple(shape))
def transpose(x): return apply("transpose", [x])
def log_softmax(x, axis=-1): return apply("log_softmax", [x], axis=axis)
def softmax(x, axis=-1): return apply("softmax", [x], axis=axis)
def logsumexp(x, axis=-1): return apply("logsumexp", [x], axis=axis)
def embedding(table, indices): return apply("embedding", [table], indices=np.asarray(indices))
def gather(x, index, axis=-1): return apply("gather", [x], index=np.asarray(index), axis=axis)
def tsum(x, axis=None): return apply("sum", [x], axis=axis)
def mean(x, axis=None): return apply("mean", [x], axis=axis)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool = True):
    """Identity at eval time or when ``p == 0``."""
    if not training or p == 0.0:
        return x
    return apply("dropout", [x], p=p, rng=rng)
