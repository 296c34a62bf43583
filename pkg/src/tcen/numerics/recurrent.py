"""Gated recurrent cell primitives (input/forget/cell/output gate order).

``lstm`` runs a whole masked sequence in one tape node and back-propagates
through time by hand; ``bilstm`` does the same for a forward and a reverse
layer in one loop; ``lstm_cell`` is the single-step form used by
decoders whose next input depends on the previous state.  Both are checked
against central differences in the test suite.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .primitives import apply, register


def _gate_scale(hid: int) -> np.ndarray:
    scale = np.full(4 * hid, 0.5)
    scale[2 * hid:3 * hid] = 1.0
    return scale


def _gates(a: np.ndarray, scale: np.ndarray, hid: int):
    """One tanh call for all four gates: sigmoid(x) = (1 + tanh(x/2)) / 2."""
    t = np.tanh(a * scale)
    s = 0.5 * (1.0 + t)
    return s[:, :hid], s[:, hid:2 * hid], t[:, 2 * hid:3 * hid], s[:, 3 * hid:]


def _check_lstm(kind, arrays, attrs):
    x, wx, wh, b = arrays
    if x.ndim != 3:
        raise ShapeError(kind, f"input must be (batch, time, features), got {x.shape}")
    h = wh.shape[0]
    if wx.shape != (x.shape[2], 4 * h) or wh.shape != (h, 4 * h) or b.shape != (4 * h,):
        raise ShapeError(kind, f"weights {wx.shape}, {wh.shape}, {b.shape} do not fit "
                               f"input width {x.shape[2]} and hidden size {h}")
    lengths = attrs["lengths"]
    if len(lengths) != x.shape[0] or (len(lengths) and max(lengths) > x.shape[1]):
        raise ShapeError(kind, f"lengths {list(lengths)} do not fit input {x.shape}")


def _run(xw: np.ndarray, wh: np.ndarray, mask: np.ndarray):
    """Recurrence over direction-stacked inputs.

    ``xw`` is ``(D, T, B, 4H)`` in step order, ``wh`` is ``(D, H, 4H)`` and
    ``mask`` is a boolean ``(D, T, B, 1)``.  Returns step-ordered outputs
    ``(D, T, B, H)`` (zero at padding) and the cache used by ``_run_back``.
    """
    n_dir, steps, n, width = xw.shape
    hid = width // 4
    # sigmoid(a) = (1 + tanh(a/2)) / 2: fold the halving into the inputs once
    scale = _gate_scale(hid)
    xw = xw * scale
    wh = wh * scale
    gates = np.empty_like(xw)
    cs = np.zeros((n_dir, steps + 1, n, hid))
    hs = np.zeros((n_dir, steps + 1, n, hid))
    tcs = np.empty((n_dir, steps, n, hid))
    h_new = np.empty((n_dir, steps, n, hid))
    for s in range(steps):
        m = mask[:, s]
        gs = gates[:, s]
        np.matmul(hs[:, s], wh, out=gs)
        gs += xw[:, s]
        np.tanh(gs, out=gs)
        g = gs[..., 2 * hid:3 * hid].copy()
        gs *= 0.5
        gs += 0.5
        gs[..., 2 * hid:3 * hid] = g
        c_new = gs[..., hid:2 * hid] * cs[:, s]
        c_new += gs[..., :hid] * g
        tc = np.tanh(c_new, out=tcs[:, s])
        hn = np.multiply(gs[..., 3 * hid:], tc, out=h_new[:, s])
        cs[:, s + 1] = np.where(m, c_new, cs[:, s])
        hs[:, s + 1] = np.where(m, hn, hs[:, s])
    out = h_new * mask
    return out, (gates, cs[:, :-1], hs[:, :-1], tcs)


def _run_back(gout: np.ndarray, wh: np.ndarray, mask: np.ndarray, cache):
    """Back-propagation through time; returns ``(d xw, d wh)`` in the layout of ``_run``.

    Padded steps get zero local derivatives up front, so they pass no
    gradient to inputs or weights.  The carries they do pass reach only the
    constant initial state, which has no gradient.
    """
    gates, c_prev, h_prev, tcs = cache
    n_dir, steps, n, width = gates.shape
    hid = width // 4
    i, f, g, o = (gates[..., k * hid:(k + 1) * hid] for k in range(4))
    # local derivative of each gate pre-activation, all steps at once
    local = np.empty_like(gates)
    local[..., :hid] = g * i * (1.0 - i)
    local[..., hid:2 * hid] = c_prev * f * (1.0 - f)
    local[..., 2 * hid:3 * hid] = i * (1.0 - g * g)
    local[..., 3 * hid:] = tcs * o * (1.0 - o)
    local *= mask
    gout = gout * mask
    dtc = o * (1.0 - tcs * tcs)
    wh_t = np.swapaxes(wh, 1, 2)
    dxw = np.empty_like(gates)
    buf = np.empty((n_dir, n, width))
    cview = buf[..., :3 * hid].reshape(n_dir, n, 3, hid)
    dh = np.zeros((n_dir, n, hid))
    dc = np.zeros((n_dir, n, hid))
    for s in range(steps - 1, -1, -1):
        dh_new = gout[:, s] + dh
        dc_new = dh_new * dtc[:, s]
        dc_new += dc
        cview[...] = dc_new[:, :, None, :]
        buf[..., 3 * hid:] = dh_new
        da = np.multiply(buf, local[:, s], out=dxw[:, s])
        dh = da @ wh_t
        dc = dc_new * f[:, s]
    flat_h = h_prev.reshape(n_dir, steps * n, hid)
    dwh = np.swapaxes(flat_h, 1, 2) @ dxw.reshape(n_dir, steps * n, width)
    return dxw, dwh


def _step_mask(lengths: np.ndarray, steps: int, reverse: bool) -> np.ndarray:
    t = np.arange(steps)
    if reverse:
        t = t[::-1]
    return (t[:, None] < np.asarray(lengths)[None, :])[:, :, None]


def _to_steps(a: np.ndarray, reverse: bool) -> np.ndarray:
    """``(B, T, ...)`` batch-major -> ``(T, B, ...)`` step order."""
    a = np.swapaxes(a, 0, 1)
    return a[::-1] if reverse else a


def _from_steps(a: np.ndarray, reverse: bool) -> np.ndarray:
    if reverse:
        a = a[::-1]
    return np.swapaxes(a, 0, 1)


@register("lstm", _check_lstm)
class _Lstm:
    @staticmethod
    def forward(ins, attrs):
        x, wx, wh, b = ins
        rev = bool(attrs.get("reverse"))
        xw = _to_steps(x @ wx + b, rev)[None]
        mask = _step_mask(attrs["lengths"], x.shape[1], rev)[None]
        out, cache = _run(np.ascontiguousarray(xw), wh[None], mask)
        return np.ascontiguousarray(_from_steps(out[0], rev)), (mask, cache)

    @staticmethod
    def backward(gout, ins, out, saved, attrs):
        x, wx, wh, b = ins
        rev = bool(attrs.get("reverse"))
        mask, cache = saved
        g = np.ascontiguousarray(_to_steps(gout, rev))[None]
        dxw_s, dwh = _run_back(g, wh[None], mask, cache)
        steps, n = x.shape[1], x.shape[0]
        xs = np.ascontiguousarray(_to_steps(x, rev)).reshape(steps * n, -1)
        flat = dxw_s[0].reshape(steps * n, -1)
        dx = _from_steps((flat @ wx.T).reshape(steps, n, -1), rev)
        return [dx, xs.T @ flat, dwh[0], flat.sum(axis=0)]


def _check_bilstm(kind, arrays, attrs):
    x = arrays[0]
    _check_lstm(kind, arrays[:4], attrs)
    _check_lstm(kind, [x] + list(arrays[4:]), attrs)
    if arrays[2].shape != arrays[5].shape:
        raise ShapeError(kind, "both directions need the same hidden size")


@register("bilstm", _check_bilstm)
class _BiLstm:
    """Forward and reverse layers over the same input, run in one loop.

    Output is ``(B, T, 2H)``: forward states then reverse states.
    """

    @staticmethod
    def forward(ins, attrs):
        x, wx_f, wh_f, b_f, wx_b, wh_b, b_b = ins
        steps = x.shape[1]
        xw = np.stack([_to_steps(x @ wx_f + b_f, False), _to_steps(x @ wx_b + b_b, True)])
        mask = np.stack([_step_mask(attrs["lengths"], steps, False),
                         _step_mask(attrs["lengths"], steps, True)])
        out, cache = _run(xw, np.stack([wh_f, wh_b]), mask)
        both = np.concatenate([_from_steps(out[0], False), _from_steps(out[1], True)], axis=-1)
        return both, (mask, cache)

    @staticmethod
    def backward(gout, ins, out, saved, attrs):
        x, wx_f, wh_f, b_f, wx_b, wh_b, b_b = ins
        hid = wh_f.shape[0]
        mask, cache = saved
        g = np.stack([_to_steps(gout[..., :hid], False), _to_steps(gout[..., hid:], True)])
        dxw_s, dwh = _run_back(g, np.stack([wh_f, wh_b]), mask, cache)
        steps, n = x.shape[1], x.shape[0]
        grads = []
        dx = 0.0
        for k, (wx, rev) in enumerate(((wx_f, False), (wx_b, True))):
            xs = np.ascontiguousarray(_to_steps(x, rev)).reshape(steps * n, -1)
            flat = dxw_s[k].reshape(steps * n, -1)
            dx = dx + _from_steps((flat @ wx.T).reshape(steps, n, -1), rev)
            grads.append([xs.T @ flat, dwh[k], flat.sum(axis=0)])
        return [dx] + grads[0] + grads[1]


def _check_cell(kind, arrays, attrs):
    x, h, c, wx, wh, b = arrays
    hid = wh.shape[0]
    if h.shape != c.shape or h.shape != (x.shape[0], hid):
        raise ShapeError(kind, f"state shapes {h.shape}, {c.shape} do not fit batch "
                               f"{x.shape[0]} and hidden size {hid}")
    if wx.shape != (x.shape[1], 4 * hid) or wh.shape != (hid, 4 * hid) or b.shape != (4 * hid,):
        raise ShapeError(kind, f"weights {wx.shape}, {wh.shape}, {b.shape} do not fit "
                               f"input width {x.shape[1]} and hidden size {hid}")


@register("lstm_cell", _check_cell)
class _LstmCell:
    """Output is ``[h_new, c_new]`` concatenated on the last axis."""

    @staticmethod
    def forward(ins, attrs):
        x, h, c, wx, wh, b = ins
        hid = wh.shape[0]
        i, f, g, o = _gates(x @ wx + h @ wh + b, _gate_scale(hid), hid)
        c_new = f * c + i * g
        tc = np.tanh(c_new)
        return np.concatenate([o * tc, c_new], axis=1), (i, f, g, o, tc)

    @staticmethod
    def backward(gout, ins, out, saved, attrs):
        x, h, c, wx, wh, b = ins
        i, f, g, o, tc = saved
        hid = wh.shape[0]
        dh_new = gout[:, :hid]
        dc_new = gout[:, hid:] + dh_new * o * (1.0 - tc * tc)
        da = np.concatenate([
            dc_new * g * i * (1.0 - i),
            dc_new * c * f * (1.0 - f),
            dc_new * i * (1.0 - g * g),
            dh_new * tc * o * (1.0 - o),
        ], axis=1)
        return [da @ wx.T, da @ wh.T, dc_new * f, x.T @ da, h.T @ da, da.sum(axis=0)]


def lstm(x, wx, wh, b, lengths, reverse: bool = False):
    return apply("lstm", [x, wx, wh, b], lengths=np.asarray(lengths), reverse=reverse)


def bilstm(x, fwd: tuple, bwd: tuple, lengths):
    """Both directions of one layer; ``fwd``/``bwd`` are ``(wx, wh, b)`` triples."""
    return apply("bilstm", [x, *fwd, *bwd], lengths=np.asarray(lengths))


def lstm_cell(x, h, c, wx, wh, b):
    hid = b.shape[0] // 4
    out = apply("lstm_cell", [x, h, c, wx, wh, b])
    return out[:, :hid], out[:, hid:]
