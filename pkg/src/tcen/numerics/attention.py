"""Additive attention step as a single primitive.

A decoder calls attention once per output position, so the dozen small
operations it is made of would dominate tape overhead.  This node computes

    score_t = v . tanh(keys_t + query @ w_query) + mask_t
    weights = softmax(score)
    ctx     = sum_t weights_t memory_t

and back-propagates by hand.  ``keys`` (the projected memory plus bias) is
an input so it can be computed once per sequence.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeError
from .primitives import apply, register
from .recurrent import _gate_scale
from .tensor import Tensor


def _check(kind, arrays, attrs):
    query, keys, memory, w_query, v = arrays
    n, steps, att = keys.shape
    if query.ndim != 2 or query.shape[0] != n:
        raise ShapeError(kind, f"query {query.shape} does not fit keys {keys.shape}")
    if memory.shape[:2] != (n, steps):
        raise ShapeError(kind, f"memory {memory.shape} does not fit keys {keys.shape}")
    if w_query.shape != (query.shape[1], att) or v.shape != (att, 1):
        raise ShapeError(kind, f"weights {w_query.shape}, {v.shape} do not fit "
                               f"query width {query.shape[1]} and attention width {att}")
    if attrs["mask_add"].shape != (n, steps):
        raise ShapeError(kind, f"mask {attrs['mask_add'].shape} != {(n, steps)}")


@register("additive_attention", _check)
class _AdditiveAttention:
    """Output is ``[weights (B, T), ctx (B, D)]`` concatenated on the last axis."""

    @staticmethod
    def forward(ins, attrs):
        query, keys, memory, w_query, v = ins
        th = np.tanh(keys + (query @ w_query)[:, None, :])
        scores = (th @ v)[..., 0] + attrs["mask_add"]
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        w = e / e.sum(axis=1, keepdims=True)
        ctx = (w[:, None, :] @ memory)[:, 0]
        return np.concatenate([w, ctx], axis=1), (th, w)

    @staticmethod
    def backward(gout, ins, out, saved, attrs):
        query, keys, memory, w_query, v = ins
        th, w = saved
        n, steps, att = keys.shape
        g_w, g_ctx = gout[:, :steps], gout[:, steps:]
        g_w = g_w + (memory @ g_ctx[:, :, None])[..., 0]
        g_mem = w[:, :, None] * g_ctx[:, None, :]
        g_s = w * (g_w - (w * g_w).sum(axis=1, keepdims=True))
        g_v = th.reshape(-1, att).T @ g_s.reshape(-1, 1)
        g_pre = g_s[:, :, None] * v[:, 0] * (1.0 - th * th)
        g_q = g_pre.sum(axis=1)
        return [g_q @ w_query.T, g_pre, g_mem, query.T @ g_q, g_v]


def additive_attention(query, keys, memory, w_query, v, mask_add: np.ndarray):
    """Returns ``(weights, ctx)``; ``weights`` is a plain untracked tensor for inspection."""
    out = apply("additive_attention", [query, keys, memory, w_query, v],
                mask_add=np.asarray(mask_add, dtype=np.float64))
    steps = mask_add.shape[1]
    return Tensor(out.data[:, :steps]), out[:, steps:]


def _check_recur(kind, arrays, attrs):
    embs, keys, memory, w_query, v, wx, wh, b = arrays
    n, steps, width = embs.shape
    hid = wh.shape[0]
    _check(kind, [np.zeros((n, hid)), keys, memory, w_query, v], attrs)
    if wx.shape != (width + memory.shape[2], 4 * hid) or wh.shape != (hid, 4 * hid) or b.shape != (4 * hid,):
        raise ShapeError(kind, f"cell weights {wx.shape}, {wh.shape}, {b.shape} do not fit input "
                               f"width {width}+{memory.shape[2]} and hidden size {hid}")


@register("attention_lstm", _check_recur)
class _AttentionLstm:
    """A one-layer attention decoder over a whole teacher-forced sequence.

    At step k the previous state h attends over ``memory`` (same rule as
    ``additive_attention``), and ``[embs[:, k], ctx]`` drives one gated cell
    step.  Output is the stack of states ``(B, K, H)``; the initial state is
    zero.
    """

    @staticmethod
    def forward(ins, attrs):
        embs, keys, memory, w_query, v, wx, wh, b = ins
        n, steps, width = embs.shape
        hid = wh.shape[0]
        mask_add = attrs["mask_add"]
        wx_e, wx_c = wx[:width], wx[width:]
        ew = embs @ wx_e + b                          # input part, all steps at once
        h = np.zeros((n, hid))
        c = np.zeros((n, hid))
        hs = np.empty((n, steps + 1, hid))
        hs[:, 0] = 0.0
        cs = np.empty((n, steps + 1, hid))
        cs[:, 0] = 0.0
        ths = np.empty((steps,) + keys.shape)
        ws = np.empty((n, steps, keys.shape[1]))
        ctxs = np.empty((n, steps, memory.shape[2]))
        gates = np.empty((n, steps, 4 * hid))
        tcs = np.empty((n, steps, hid))
        vv = v[:, 0]
        scale = _gate_scale(hid)
        for k in range(steps):
            th = np.tanh(keys + (h @ w_query)[:, None, :], out=ths[k])
            scores = th @ vv + mask_add
            e = np.exp(scores - scores.max(axis=1, keepdims=True))
            w = np.divide(e, e.sum(axis=1, keepdims=True), out=ws[:, k])
            ctx = np.matmul(w[:, None, :], memory)[:, 0]
            ctxs[:, k] = ctx
            a = ew[:, k] + ctx @ wx_c + h @ wh
            z = np.tanh(a * scale)
            gs = gates[:, k]
            gs[...] = 0.5 * z + 0.5
            gs[:, 2 * hid:3 * hid] = z[:, 2 * hid:3 * hid]
            c = gs[:, hid:2 * hid] * c + gs[:, :hid] * gs[:, 2 * hid:3 * hid]
            tc = np.tanh(c, out=tcs[:, k])
            h = gs[:, 3 * hid:] * tc
            hs[:, k + 1] = h
            cs[:, k + 1] = c
        return hs[:, 1:].copy(), (hs, cs, ths, ws, ctxs, gates, tcs)

    @staticmethod
    def backward(gout, ins, out, saved, attrs):
        embs, keys, memory, w_query, v, wx, wh, b = ins
        hs, cs, ths, ws, ctxs, gates, tcs = saved
        n, steps, width = embs.shape
        hid = wh.shape[0]
        att = keys.shape[2]
        vv = v[:, 0]
        wx_c = wx[width:]
        i, f, g, o = (gates[..., j * hid:(j + 1) * hid] for j in range(4))
        local = np.empty_like(gates)
        local[..., :hid] = g * i * (1.0 - i)
        local[..., hid:2 * hid] = cs[:, :-1] * f * (1.0 - f)
        local[..., 2 * hid:3 * hid] = i * (1.0 - g * g)
        local[..., 3 * hid:] = tcs * o * (1.0 - o)
        dtc = o * (1.0 - tcs * tcs)
        d_a = np.empty_like(gates)
        d_ctx = np.empty_like(ctxs)
        g_s_all = np.empty_like(ws)
        g_q_all = np.empty((n, steps, att))
        d_keys = np.zeros_like(keys)
        dh = np.zeros((n, hid))
        dc = np.zeros((n, hid))
        buf = np.empty((n, 4 * hid))
        cview = buf[:, :3 * hid].reshape(n, 3, hid)
        wh_t, wxc_t, wq_t = wh.T, wx_c.T, w_query.T
        for k in range(steps - 1, -1, -1):
            dh_k = gout[:, k] + dh
            dc_new = dh_k * dtc[:, k]
            dc_new += dc
            cview[...] = dc_new[:, None, :]
            buf[:, 3 * hid:] = dh_k
            da = np.multiply(buf, local[:, k], out=d_a[:, k])
            dctx = np.matmul(da, wxc_t, out=d_ctx[:, k])
            w = ws[:, k]
            g_w = np.matmul(memory, dctx[:, :, None])[..., 0]
            g_s = w * (g_w - (w * g_w).sum(axis=1, keepdims=True))
            g_s_all[:, k] = g_s
            th = ths[k]
            g_pre = g_s[:, :, None] * vv * (1.0 - th * th)
            d_keys += g_pre
            g_q = g_pre.sum(axis=1)
            g_q_all[:, k] = g_q
            dh = da @ wh_t + g_q @ wq_t
            dc = dc_new * f[:, k]
        flat_a = d_a.reshape(n * steps, -1)
        h_prev = hs[:, :-1].reshape(n * steps, hid)
        x_in = np.concatenate([embs, ctxs], axis=2).reshape(n * steps, -1)
        d_x = flat_a @ wx.T
        d_embs = d_x[:, :width].reshape(embs.shape)
        d_mem = np.matmul(np.swapaxes(ws, 1, 2), d_ctx)
        th_flat = np.swapaxes(ths, 0, 1).reshape(-1, att)
        d_v = th_flat.T @ g_s_all.reshape(-1, 1)
        d_wq = h_prev.T @ g_q_all.reshape(-1, att)
        return [d_embs, d_keys, d_mem, d_wq, d_v, x_in.T @ flat_a, h_prev.T @ flat_a,
                flat_a.sum(axis=0)]


def attention_lstm(embs, keys, memory, w_query, v, wx, wh, b, mask_add: np.ndarray):
    """States ``(B, K, H)`` of a one-layer attention decoder fed ``embs``."""
    return apply("attention_lstm", [embs, keys, memory, w_query, v, wx, wh, b],
                 mask_add=np.asarray(mask_add, dtype=np.float64))
