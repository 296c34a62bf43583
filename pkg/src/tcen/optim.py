"""Learning-rate schedule, gradient clipping and the Adam update."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError
from .numerics import Parameter


@dataclass
class ScheduleConfig:
    """``lrate(n) = scale_k * d_model**-0.5 * min(n**-0.5, n * warmup_n**-1.5)``.

    The desk defaults are tuned for a few thousand steps of a d=64 model;
    ``large()`` gives the long-run values (k=10, 25000 warmup steps).
    """

    scale_k: float = 1.0
    d_model: int = 64
    warmup_n: int = 400

    def __post_init__(self):
        if not (self.scale_k > 0 and self.d_model > 0 and self.warmup_n > 0):
            raise ConfigError("schedule scale_k, d_model and warmup_n must all be positive")

    @classmethod
    def large(cls, d_model: int = 256) -> "ScheduleConfig":
        return cls(scale_k=10.0, d_model=d_model, warmup_n=25000)


def lrate(n: int, cfg: ScheduleConfig) -> float:
    if n < 1:
        raise ConfigError(f"learning-rate step must be >= 1, got {n}")
    return cfg.scale_k * cfg.d_model ** -0.5 * min(n ** -0.5, n * cfg.warmup_n ** -1.5)


def clip_gradients(named: Sequence[tuple[str, Parameter]], max_norm: float,
                   flat: np.ndarray | None = None) -> float:
    """Rescale all gradients so their global L2 norm is at most ``max_norm``.

    ``flat`` may be a single buffer that every gradient is a view of (see
    ``Adam``); it is then used directly.  Returns the factor applied (1.0
    when no clipping was needed).
    """
    if not max_norm > 0:
        raise ConfigError("max_norm must be positive")
    if flat is not None:
        total = float(np.dot(flat, flat))
    else:
        total = sum(float(np.dot(p.grad.ravel(), p.grad.ravel())) for _, p in named)
    if not math.isfinite(total):
        for name, p in named:
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")
        raise NumericError("gradient norm overflowed")
    norm = math.sqrt(total)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    if flat is not None:
        flat *= scale
    else:
        for _, p in named:
            p.grad *= scale
    return scale


class Adam:
    """Adam with bias correction; moments are keyed by parameter name.

    On construction every parameter's data and gradient are moved into two
    contiguous buffers (the parameters keep views), so zeroing, clipping and
    the update each run as a handful of whole-buffer operations.
    """

    def __init__(self, named: Iterable[tuple[str, Parameter]], beta1: float = 0.9,
                 beta2: float = 0.98, eps: float = 1e-9):
        self.params = dict(named)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.slices: dict[str, slice] = {}
        lo = 0
        for k, p in self.params.items():
            self.slices[k] = slice(lo, lo + p.data.size)
            lo += p.data.size
        self.data = np.empty(lo)
        self.grad = np.empty(lo)
        for k, p in self.params.items():
            sl = self.slices[k]
            self.data[sl] = p.data.ravel()
            self.grad[sl] = p.grad.ravel()
            p.data = self.data[sl].reshape(p.data.shape)
            p.grad = self.grad[sl].reshape(p.grad.shape)
        self.m_flat = np.zeros(lo)
        self.v_flat = np.zeros(lo)
        self._tmp = np.empty(lo)
        self.t = 0

    @property
    def m(self) -> dict[str, np.ndarray]:
        return {k: self.m_flat[sl].reshape(self.params[k].shape) for k, sl in self.slices.items()}

    @property
    def v(self) -> dict[str, np.ndarray]:
        return {k: self.v_flat[sl].reshape(self.params[k].shape) for k, sl in self.slices.items()}

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        g, m, v, tmp = self.grad, self.m_flat, self.v_flat, self._tmp
        m *= b1
        np.multiply(g, 1.0 - b1, out=tmp)
        m += tmp
        v *= b2
        np.multiply(g, g, out=tmp)
        tmp *= 1.0 - b2
        v += tmp
        if lr:
            # lr * (m / c1) / (sqrt(v / c2) + eps)
            np.sqrt(v, out=tmp)
            tmp *= 1.0 / math.sqrt(c2)
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= lr / c1
            self.data -= tmp

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, sl in self.slices.items():
            shape = self.params[k].shape
            out[f"adam.m.{k}"] = self.m_flat[sl].reshape(shape)
            out[f"adam.v.{k}"] = self.v_flat[sl].reshape(shape)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for k, sl in self.slices.items():
            for which, store in (("m", self.m_flat), ("v", self.v_flat)):
                key = f"adam.{which}.{k}"
                if key not in arrays:
                    raise DataError(f"checkpoint lacks optimizer moment {key!r}")
                if arrays[key].shape != self.params[k].shape:
                    raise DataError(f"optimizer moment {key!r} has shape {arrays[key].shape}")
                store[sl] = arrays[key].ravel()
        self.t = t
