from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import NumericError
from .tensor import Parameter, Tape, Tensor, no_tape

FLOOR = 1e-6


def grad_check(f: Callable[[], Tensor], p: Parameter, step: float = 1e-4) -> float:
    """Largest relative error between tape gradients and finite differences.

    ``f`` is re-evaluated with single entries of ``p`` nudged by ``+-step``
    and ``+-2 step`` (fourth-order central stencil); it must be deterministic
    (seed any dropout inside it).  The error per entry is
    ``|a - cd| / max(|a|, |cd|, FLOOR)``: entries smaller than ``FLOOR`` are
    below what float64 differences resolve, so they are judged on absolute
    error.  ``p.grad`` is left as it was found.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    with Tape() as tape:
        loss = f()
    grads = tape.gradients(loss)
    analytic = grads[id(p)][1] if id(p) in grads else np.zeros_like(p.data)

    worst = 0.0
    flat = p.data.reshape(-1)
    with no_tape():
        for k in range(flat.size):
            orig = flat[k]
            vals = []
            for h in (2.0 * step, step, -step, -2.0 * step):
                flat[k] = orig + h
                vals.append(f().item())
            flat[k] = orig
            if not all(np.isfinite(vals)):
                idx = np.unravel_index(k, p.shape)
                raise NumericError(f"non-finite loss when perturbing {p.name or 'parameter'}{list(idx)}")
            cd = (-vals[0] + 8.0 * vals[1] - 8.0 * vals[2] + vals[3]) / (12.0 * step)
            a = analytic.reshape(-1)[k]
            err = abs(a - cd) / max(abs(a), abs(cd), FLOOR)
            worst = max(worst, err)
    return worst
