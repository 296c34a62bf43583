"""Reusable network pieces: linear maps, recurrent stacks, additive attention, decoder."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from ..numerics import (
    NEG,
    Parameter,
    additive_attention,
    attention_lstm,
    bilstm,
    Tensor,
    concat,
    dropout,
    embedding,
    lstm,
    lstm_cell,
    matmul,
    stack,
)


def glorot(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Minimal parameter container.

    Parameters and sub-modules are discovered from attributes in definition
    order, so names are stable across runs.  A parameter reachable under two
    names (weight tying) is reported once, under the first.
    """

    training = False
    drop_p = 0.0
    drop_rng: np.random.Generator | None = None

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        seen: set[int] = set()
        for name, p in self._walk(prefix):
            if id(p) not in seen:
                seen.add(id(p))
                yield name, p

    def _walk(self, prefix):
        for key, val in vars(self).items():
            if isinstance(val, Parameter):
                yield prefix + key, val
            elif isinstance(val, Module):
                yield from val._walk(prefix + key + ".")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item._walk(f"{prefix}{key}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def modules(self) -> Iterator["Module"]:
        yield self
        for val in vars(self).values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, p: float, rng: np.random.Generator) -> None:
        for m in self.modules():
            m.training, m.drop_p, m.drop_rng = True, p, rng

    def eval(self) -> None:
        for m in self.modules():
            m.training, m.drop_p, m.drop_rng = False, 0.0, None

    def drop(self, x: Tensor) -> Tensor:
        return dropout(x, self.drop_p, self.drop_rng, self.training)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        self.weight = Parameter(glorot(rng, (n_in, n_out), n_in, n_out))
        if bias:
            self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        y = matmul(x, self.weight)
        return y + self.bias if hasattr(self, "bias") else y


@dataclass
class EncoderOutput:
    """Padded states ``(B, T, d)`` plus valid lengths per example."""

    states: Tensor
    lengths: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        steps = self.states.shape[1]
        return (np.arange(steps)[None, :] < self.lengths[:, None]).astype(float)


class LstmLayer(Module):
    def __init__(self, n_in: int, hidden: int, rng: np.random.Generator):
        self.wx = Parameter(glorot(rng, (n_in, 4 * hidden), n_in, 4 * hidden))
        self.wh = Parameter(glorot(rng, (hidden, 4 * hidden), hidden, 4 * hidden))
        self.b = Parameter(np.zeros(4 * hidden))

    def __call__(self, x: Tensor, lengths, reverse: bool = False) -> Tensor:
        return lstm(x, self.wx, self.wh, self.b, lengths, reverse=reverse)


class BiLstm(Module):
    """Stack of bidirectional layers; each direction has ``d // 2`` units so outputs are ``d`` wide."""

    def __init__(self, n_in: int, d: int, layers: int, rng: np.random.Generator):
        if d % 2:
            raise ValueError("bidirectional width must be even")
        self.fwd = [LstmLayer(n_in if i == 0 else d, d // 2, rng) for i in range(layers)]
        self.bwd = [LstmLayer(n_in if i == 0 else d, d // 2, rng) for i in range(layers)]

    def __call__(self, x: Tensor, lengths) -> Tensor:
        for i, (f, b) in enumerate(zip(self.fwd, self.bwd)):
            if i:
                x = self.drop(x)
            x = bilstm(x, (f.wx, f.wh, f.b), (b.wx, b.wh, b.b), lengths)
        return x


class AdditiveAttention(Module):
    """``score_t = v . tanh(W_k h_t + W_q z + b)``, softmax over valid positions."""

    def __init__(self, query_dim: int, key_dim: int, att_dim: int, rng: np.random.Generator):
        self.w_key = Parameter(glorot(rng, (key_dim, att_dim), key_dim, att_dim))
        self.w_query = Parameter(glorot(rng, (query_dim, att_dim), query_dim, att_dim))
        self.bias = Parameter(np.zeros(att_dim))
        self.v = Parameter(glorot(rng, (att_dim, 1), att_dim, 1))

    def prepare(self, memory: EncoderOutput) -> tuple[Tensor, np.ndarray]:
        """Query-independent part, computed once per sequence."""
        keys = matmul(memory.states, self.w_key) + self.bias
        mask_add = np.where(memory.mask > 0, 0.0, NEG)
        return keys, mask_add

    def __call__(self, query: Tensor, memory: EncoderOutput, prepared) -> tuple[Tensor, Tensor]:
        keys, mask_add = prepared
        return additive_attention(query, keys, memory.states, self.w_query, self.v, mask_add)


class Decoder(Module):
    """Unidirectional gated decoder; ``z_k = dec(z_{k-1}, y_{k-1}, c_k)``.

    Teacher-forced runs of a one-layer decoder go through the fused
    ``attention_lstm`` primitive; set ``fused = False`` to force the
    step-by-step path (same numbers, slower).
    """

    fused = True

    def __init__(self, vocab_size: int, d: int, layers: int, rng: np.random.Generator):
        self.embed = Parameter(glorot(rng, (vocab_size, d), vocab_size, d))
        self.cells = [LstmLayer(2 * d if i == 0 else d, d, rng) for i in range(layers)]
        self.out = Linear(d, vocab_size, rng)
        self.d = d
        self.calls = 0

    def initial_state(self, batch: int) -> list[tuple[Tensor, Tensor]]:
        zero = Tensor(np.zeros((batch, self.d)))
        return [(zero, zero) for _ in self.cells]

    def step(self, state, y_prev: np.ndarray | Tensor, memory: EncoderOutput,
             attention: AdditiveAttention, prepared) -> tuple[list, Tensor]:
        """Advance one position; ``y_prev`` is ids or an already embedded ``(B, d)`` tensor."""
        self.calls += 1
        emb = y_prev if isinstance(y_prev, Tensor) else embedding(self.embed, y_prev)
        weights, ctx = attention(state[-1][0], memory, prepared)
        x = concat([emb, ctx], axis=-1)
        new = []
        for i, (cell, (h, c)) in enumerate(zip(self.cells, state)):
            if i:
                x = self.drop(x)
            h, c = lstm_cell(x, h, c, cell.wx, cell.wh, cell.b)
            new.append((h, c))
            x = h
        return new, weights

    def run(self, memory: EncoderOutput, inputs: np.ndarray | Tensor,
            attention: AdditiveAttention) -> Tensor:
        """Top-layer states ``(B, K, d)`` for gold previous inputs (ids or embedded ``(B, K, d)``)."""
        embs = inputs if isinstance(inputs, Tensor) else embedding(self.embed, inputs)
        embs = self.drop(embs)
        n, steps = embs.shape[:2]
        prepared = attention.prepare(memory)
        if len(self.cells) == 1 and self.fused:
            self.calls += steps
            keys, mask_add = prepared
            cell = self.cells[0]
            return attention_lstm(embs, keys, memory.states, attention.w_query, attention.v,
                                  cell.wx, cell.wh, cell.b, mask_add)
        state = self.initial_state(n)
        tops = []
        for k in range(steps):
            state, _ = self.step(state, embs[:, k], memory, attention, prepared)
            tops.append(state[-1][0])
        return stack(tops, axis=1)

    def teacher_forced(self, memory: EncoderOutput, target_in: np.ndarray,
                       attention: AdditiveAttention) -> Tensor:
        """Logits ``(B, K, V)`` for gold previous tokens."""
        return self.out(self.drop(self.run(memory, target_in, attention)))
