"""Stacked-stream LSTM sequence kernels with masking and exact BPTT.

``K`` independent LSTM streams (e.g. the forward and backward directions of a
bidirectional layer, possibly for several decoders at once) are advanced in a
single Python loop using batched matmuls. Shapes::

    wx (K, 4h, d)   wh (K, 4h, h)   b (K, 4h)
    x  (K, B, T, d)  or (K, B, 1, d) for a time-constant input
    mask (K, B, T) bool, optional; False steps carry state and emit zeros
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..numeric import DimensionError, sigmoid


@dataclass
class StreamCache:
    wx: np.ndarray
    wh: np.ndarray
    x: np.ndarray
    mask: np.ndarray | None
    steps: int
    gates: np.ndarray  # (T, K, B, 4h) post-activation i, f, g, o
    c_prev: np.ndarray  # (T, K, B, h)
    h_prev: np.ndarray  # (T, K, B, h)
    tanh_c: np.ndarray  # (T, K, B, h)


def streams_forward(wx, wh, b, x, mask=None, steps=None):
    """Run K LSTM streams from zero state.

    Returns ``(outputs (K, B, T, h), final_h (K, B, h), cache)``.
    """
    K, four_h, d = wx.shape
    h = four_h // 4
    if wh.shape != (K, four_h, h):
        raise DimensionError("wh", (K, four_h, h), wh.shape)
    if x.shape[0] != K or x.shape[3] != d:
        raise DimensionError("x", (K, "B", "T", d), x.shape)
    B = x.shape[1]
    T = x.shape[2] if steps is None else steps
    const_input = x.shape[2] == 1 and T != 1
    if T < 1:
        raise DimensionError("x", "at least one timestep", x.shape)

    proj = np.matmul(x, wx.transpose(0, 2, 1)[:, None]) + b[:, None, None, :]  # (K, B, T|1, 4h)
    wh_t = wh.transpose(0, 2, 1)

    gates = np.empty((T, K, B, four_h))
    c_prev_all = np.empty((T, K, B, h))
    h_prev_all = np.empty((T, K, B, h))
    tanh_all = np.empty((T, K, B, h))
    out = np.empty((K, B, T, h))

    hs = np.zeros((K, B, h))
    cs = np.zeros((K, B, h))
    for t in range(T):
        z = (proj[:, :, 0] if const_input else proj[:, :, t]) + np.matmul(hs, wh_t)
        gt = gates[t]
        gt[...] = sigmoid(z)
        gt[..., 2 * h:3 * h] = np.tanh(z[..., 2 * h:3 * h])
        c_prev_all[t] = cs
        h_prev_all[t] = hs
        c_new = gt[..., h:2 * h] * cs + gt[..., :h] * gt[..., 2 * h:3 * h]
        tc = np.tanh(c_new)
        tanh_all[t] = tc
        h_new = gt[..., 3 * h:] * tc
        if mask is None:
            cs, hs = c_new, h_new
            out[:, :, t] = h_new
        else:
            m = mask[:, :, t, None]
            cs = np.where(m, c_new, cs)
            hs = np.where(m, h_new, hs)
            out[:, :, t] = np.where(m, h_new, 0.0)

    cache = StreamCache(wx, wh, x, mask, T, gates, c_prev_all, h_prev_all, tanh_all)
    return out, hs, cache


def streams_backward(cache: StreamCache, d_out=None, d_final=None):
    """Backpropagate through :func:`streams_forward`.

    ``d_out`` is the gradient w.r.t. the per-step outputs, ``d_final`` w.r.t.
    the final hidden state. Returns ``(dx, dwx, dwh, db)`` with ``dx`` shaped
    like the forward input.
    """
    wx, wh, T = cache.wx, cache.wh, cache.steps
    K, four_h, _ = wx.shape
    h = four_h // 4
    B = cache.x.shape[1]
    mask = cache.mask

    dz_all = np.empty((T, K, B, four_h))
    dh = np.zeros((K, B, h)) if d_final is None else np.array(d_final, dtype=np.float64)
    dc = np.zeros((K, B, h))
    for t in range(T - 1, -1, -1):
        g = cache.gates[t]
        i, f, cand, o = g[..., :h], g[..., h:2 * h], g[..., 2 * h:3 * h], g[..., 3 * h:]
        tc = cache.tanh_c[t]
        if d_out is None:
            dh_step = dh
        else:
            dh_step = dh + d_out[:, :, t]
        dc_step = dc
        if mask is not None:
            m = mask[:, :, t, None]
            pass_h = np.where(m, 0.0, dh)
            pass_c = np.where(m, 0.0, dc)
            dh_step = np.where(m, dh_step, 0.0)
            dc_step = np.where(m, dc_step, 0.0)
        dc_tot = dc_step + dh_step * o * (1.0 - tc * tc)
        dz = dz_all[t]
        dz[..., :h] = dc_tot * cand * i * (1.0 - i)
        dz[..., h:2 * h] = dc_tot * cache.c_prev[t] * f * (1.0 - f)
        dz[..., 2 * h:3 * h] = dc_tot * i * (1.0 - cand * cand)
        dz[..., 3 * h:] = dh_step * tc * o * (1.0 - o)
        dh = np.matmul(dz, wh)
        dc = dc_tot * f
        if mask is not None:
            dh = dh + pass_h
            dc = dc + pass_c

    # (T, K, B, .) -> (K, T*B, .)
    dz_k = dz_all.transpose(1, 0, 2, 3).reshape(K, T * B, four_h)
    hp_k = cache.h_prev.transpose(1, 0, 2, 3).reshape(K, T * B, h)
    dwh = np.matmul(dz_k.transpose(0, 2, 1), hp_k)
    db = dz_k.sum(axis=1)
    dz_kbt = dz_all.transpose(1, 2, 0, 3)  # (K, B, T, 4h)
    x = cache.x
    if x.shape[2] == 1 and T != 1:
        dz_sum = dz_kbt.sum(axis=2, keepdims=True)  # (K, B, 1, 4h)
        dx = np.matmul(dz_sum, wx[:, None])
        dwx = np.matmul(dz_sum[:, :, 0].transpose(0, 2, 1), x[:, :, 0])
    else:
        dx = np.matmul(dz_kbt, wx[:, None])
        dwx = np.matmul(dz_kbt.reshape(K, B * T, four_h).transpose(0, 2, 1), x.reshape(K, B * T, -1))
    return dx, dwx, dwh, db
