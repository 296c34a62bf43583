"""Connectionist temporal classification.

Label ids live in ``[0, V)``; the blank is id ``V``, the last column of a
``(T, V + 1)`` log-probability matrix.  The loss is a log-space forward
recursion over the blank-interleaved label lattice built from tape
primitives, so its gradient comes from the same reverse sweep as every
other loss in the package.
"""

from __future__ import annotations

import itertools
import math
import warnings
from typing import Sequence

import numpy as np

from .errors import NumericError
from .numerics import NEG, Tensor, concat, gather, logsumexp, reshape, stack

MAX_ENUMERATION = 10**7


class InfeasibleAlignmentWarning(RuntimeWarning):
    """Raised (as a warning) when T frames cannot hold the label sequence."""


def collapse(path: Sequence[int], blank: int) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for tok in path:
        if tok != prev and tok != blank:
            out.append(int(tok))
        prev = tok
    return out


def min_frames(labels: Sequence[int]) -> int:
    """Shortest path length that collapses to ``labels`` (repeats need a blank between)."""
    repeats = sum(1 for a, b in zip(labels, labels[1:]) if a == b)
    return len(labels) + repeats


def extend_labels(labels: Sequence[int], blank: int) -> list[int]:
    """``[b, y1, b, y2, ..., yn, b]``, length ``2n + 1``."""
    ext = [blank]
    for y in labels:
        ext += [int(y), blank]
    return ext


def enumerate_legal_paths(labels: Sequence[int], frames: int, n_labels: int) -> set[tuple[int, ...]]:
    """All length-``frames`` paths over ``n_labels`` labels plus blank that collapse to ``labels``.

    Brute force over ``(n_labels + 1) ** frames`` strings; desk scale only.
    """
    size = (n_labels + 1) ** frames
    if size > MAX_ENUMERATION:
        raise ValueError(f"{size} candidate paths exceeds the enumeration bound {MAX_ENUMERATION}")
    target = list(labels)
    return {p for p in itertools.product(range(n_labels + 1), repeat=frames)
            if collapse(p, n_labels) == target}


def oracle_loss(log_probs: np.ndarray, labels: Sequence[int]) -> float:
    """``-log sum_{pi legal} prod_t P(pi_t)`` by explicit enumeration."""
    frames, width = log_probs.shape
    paths = enumerate_legal_paths(labels, frames, width - 1)
    if not paths:
        return math.inf
    scores = [sum(log_probs[t, k] for t, k in enumerate(p)) for p in paths]
    m = max(scores)
    return -(m + math.log(math.fsum(math.exp(s - m) for s in scores)))


def ctc_loss_batch(log_probs: Tensor, lengths: Sequence[int],
                   labels: Sequence[Sequence[int]]) -> tuple[Tensor | None, np.ndarray]:
    """Per-example negative log-likelihoods for a padded ``(B, T, V + 1)`` batch.

    Returns ``(losses, feasible)``: ``losses`` covers only the feasible
    examples (in batch order) and is ``None`` when none are; ``feasible``
    is a boolean mask over the batch.  Frames at or beyond an example's
    length never enter its lattice, so they receive zero gradient.
    """
    n, steps, width = log_probs.shape
    blank = width - 1
    lengths = np.asarray(lengths, dtype=int)
    feasible = np.array([len(y) > 0 and min_frames(y) <= t for y, t in zip(labels, lengths)], dtype=bool)
    if not feasible.all():
        keep = np.flatnonzero(feasible)
        if keep.size == 0:
            return None, feasible
        log_probs = log_probs[keep] if keep.size < n else log_probs
        lengths = lengths[keep]
        labels = [labels[k] for k in keep]
        n = keep.size
        steps = int(lengths.max())
        log_probs = log_probs[:, :steps]

    states = 2 * max(len(y) for y in labels) + 1
    ext = np.full((n, states), blank, dtype=int)
    for k, y in enumerate(labels):
        e = extend_labels(y, blank)
        ext[k, :len(e)] = e
    skip = np.full((n, states), NEG)
    skip[:, 2:] = np.where((ext[:, 2:] != blank) & (ext[:, 2:] != ext[:, :-2]), 0.0, NEG)
    start = np.full((n, states), NEG)
    start[:, :2] = 0.0

    emit = gather(log_probs, np.broadcast_to(ext[:, None, :], (n, steps, states)), axis=2)
    pad1 = Tensor(np.full((n, 1), NEG))
    pad2 = Tensor(np.full((n, 2), NEG))
    alpha = emit[:, 0] + Tensor(start)
    alphas = [alpha]
    for t in range(1, steps):
        stay = alpha
        step1 = concat([pad1, alpha[:, :-1]], axis=1)
        step2 = concat([pad2, alpha[:, :-2]], axis=1) + Tensor(skip)
        alpha = logsumexp(stack([stay, step1, step2], axis=0), axis=0) + emit[:, t]
        alphas.append(alpha)

    lattice = stack(alphas, axis=1) if len(alphas) > 1 else reshape(alphas[0], (n, 1, states))
    last = gather(lattice, np.broadcast_to((lengths - 1)[:, None, None], (n, 1, states)), axis=1)
    last = reshape(last, (n, states))
    ends = np.array([[2 * len(y), 2 * len(y) - 1] for y in labels])
    total = logsumexp(gather(last, ends, axis=1), axis=1)
    return -total, feasible


def ctc_loss(log_probs: Tensor, labels: Sequence[int]) -> Tensor:
    """``-log P(labels | x)`` for one ``(T, V + 1)`` matrix of log-probabilities.

    If no legal path of length T exists the result is an untracked ``+inf``
    and an :class:`InfeasibleAlignmentWarning` is issued; callers training on
    batches should skip such examples (see :func:`ctc_loss_batch`).
    """
    if log_probs.ndim != 2:
        raise NumericError(f"ctc_loss expects (T, V+1) log-probabilities, got {log_probs.shape}")
    steps = log_probs.shape[0]
    losses, feasible = ctc_loss_batch(reshape(log_probs, (1,) + log_probs.shape), [steps], [list(labels)])
    if losses is None:
        warnings.warn(f"{steps} frames cannot align {len(labels)} labels "
                      f"(need {min_frames(labels)})", InfeasibleAlignmentWarning, stacklevel=2)
        return Tensor(math.inf)
    return reshape(losses, ())


def greedy_decode(log_probs: np.ndarray | Tensor) -> list[int]:
    """Frame-wise argmax; ties go to the lowest id."""
    data = log_probs.data if isinstance(log_probs, Tensor) else np.asarray(log_probs)
    return [int(k) for k in np.argmax(data, axis=-1)]
