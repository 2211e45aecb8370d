"""Forward/backward primitives for the CNN-LSTM.

Images are channels-last ``(N, H, W, C)``. Convolution kernels are stored as
``(C_in, k, k, F)`` so ``W.reshape(C_in * k * k, F)`` lines up with the
``(c, di, dj)`` column order of :func:`numpy.lib.stride_tricks.sliding_window_view`.
Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward``
consumes the cache.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _sigmoid(x):
    # split form keeps exp() from overflowing for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv2d_forward(x, w, b):
    """'Same' 2-D convolution (cross-correlation), stride 1, odd kernel."""
    n, h, wd, c = x.shape
    k = w.shape[1]
    p = k // 2
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
    cols = sliding_window_view(xp, (k, k), axis=(1, 2)).reshape(n * h * wd, c * k * k)
    out = (cols @ w.reshape(c * k * k, -1)).reshape(n, h, wd, -1) + b
    return out, (x.shape, cols, w)


def conv2d_backward(dout, cache):
    xshape, cols, w = cache
    n, h, wd, c = xshape
    k = w.shape[1]
    p = k // 2
    f = w.shape[-1]
    d2 = dout.reshape(-1, f)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(c * k * k, f).T).reshape(n, h, wd, c, k, k)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=dout.dtype)
    for di in range(k):
        for dj in range(k):
            dxp[:, di:di + h, dj:dj + wd, :] += dcols[..., di, dj]
    return dxp[:, p:p + h, p:p + wd, :], dw, db


def _strip_slices(width, k, offset):
    """(dj, output column slice, strip column slice) for one window."""
    p = k // 2
    out = []
    for dj in range(k):
        lo, hi = max(0, p - dj), min(width, width + p - dj)
        out.append((dj, slice(lo, hi), slice(offset + lo + dj - p, offset + hi + dj - p)))
    return out


def strip_conv_forward(strip, w, b, width):
    """First-layer 'same' convolution of every ``width``-column window of a strip.

    ``strip`` is ``(B, H, S, C)``: ``B`` segments of ``S`` consecutive time
    columns. Window ``v`` of a segment covers columns ``v .. v + width - 1``.
    The frequency-direction part of the convolution is shared by all
    windows; the time-direction taps are gathered per window with columns
    outside the window masked to zero, which reproduces the window's own
    zero padding exactly. Returns ``(B, S - width + 1, H, width, F)``.
    """
    bsz, h, s, c = strip.shape
    k = w.shape[1]
    p = k // 2
    f = w.shape[-1]
    nw = s - width + 1
    sp = np.pad(strip, ((0, 0), (p, p), (0, 0), (0, 0)))
    # (B, H, S, C, k) -> rows (c, di), matching w[(c, di), (dj, f)]
    cols = sliding_window_view(sp, k, axis=1).reshape(bsz * h * s, c * k)
    y = (cols @ w.reshape(c * k, k * f)).reshape(bsz, h, s, k, f)
    out = np.empty((bsz, nw, h, width, f), dtype=y.dtype)
    out[...] = b
    for v in range(nw):
        for dj, osl, ssl in _strip_slices(width, k, v):
            out[:, v, :, osl, :] += y[:, :, ssl, dj, :]
    return out, (strip.shape, cols, w, width)


def strip_conv_backward(dout, cache):
    """Kernel and bias gradients; the strip is data, so no input gradient."""
    sshape, cols, w, width = cache
    bsz, h, s, c = sshape
    k = w.shape[1]
    f = w.shape[-1]
    nw = s - width + 1
    dy = np.zeros((bsz, h, s, k, f), dtype=dout.dtype)
    for v in range(nw):
        for dj, osl, ssl in _strip_slices(width, k, v):
            dy[:, :, ssl, dj, :] += dout[:, v, :, osl, :]
    dw = (cols.T @ dy.reshape(-1, k * f)).reshape(w.shape)
    db = dout.reshape(-1, f).sum(axis=0)
    return dw, db


# ---------------------------------------------------------------------------
# Pooling, activation, dropout, dense
# ---------------------------------------------------------------------------

def maxpool2_forward(x):
    """2x2 max-pool, stride 2; odd trailing rows/columns are dropped.

    Ties route the gradient to the first maximal element in (0,0), (0,1),
    (1,0), (1,1) order.
    """
    n, h, wd, c = x.shape
    ho, wo = h // 2, wd // 2
    q = (x[:, 0:2 * ho:2, 0:2 * wo:2], x[:, 0:2 * ho:2, 1:2 * wo:2],
         x[:, 1:2 * ho:2, 0:2 * wo:2], x[:, 1:2 * ho:2, 1:2 * wo:2])
    out = np.maximum(np.maximum(q[0], q[1]), np.maximum(q[2], q[3]))
    taken = np.zeros(out.shape, dtype=bool)
    masks = []
    for part in q:
        m = (part == out) & ~taken
        taken |= m
        masks.append(m)
    return out, (x.shape, masks)


def maxpool2_backward(dout, cache):
    xshape, masks = cache
    ho, wo = dout.shape[1:3]
    dx = np.zeros(xshape, dtype=dout.dtype)
    for m, (r, s) in zip(masks, ((0, 0), (0, 1), (1, 0), (1, 1))):
        dx[:, r:2 * ho:2, s:2 * wo:2] = dout * m
    return dx


def activation_forward(x, kind):
    if kind == "tanh":
        y = np.tanh(x)
    elif kind == "relu":
        y = np.maximum(x, 0)
    else:
        raise ValueError(f"unknown activation {kind!r}")
    return y, (kind, y)


def activation_backward(dout, cache):
    kind, y = cache
    if kind == "tanh":
        return dout * (1 - y * y)
    return dout * (y > 0)


def dropout_mask(shape, rate, rng, dtype=np.float64):
    """Inverted-dropout mask: 0 or 1/(1-rate)."""
    if rate <= 0:
        return None
    keep = rng.random(shape) >= rate
    return keep.astype(dtype) / (1.0 - rate)


def dropout_forward(x, mask):
    return (x if mask is None else x * mask), mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def dense_forward(x, w, b):
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


# ---------------------------------------------------------------------------
# LSTM
# ---------------------------------------------------------------------------

def lstm_forward(x, w, b):
    """Unroll one LSTM layer from zero state.

    ``x`` is ``(B, T, D)``; ``w`` is ``(D + H, 4H)`` acting on ``[x_t, h_{t-1}]``
    with gate blocks ordered input, forget, cell, output. Returns the hidden
    sequence ``(B, T, H)``.
    """
    bsz, steps, d = x.shape
    hdim = w.shape[1] // 4
    h = np.zeros((bsz, hdim), dtype=x.dtype)
    c = np.zeros_like(h)
    hs = np.empty((bsz, steps, hdim), dtype=x.dtype)
    tape = []
    for t in range(steps):
        xh = np.concatenate([x[:, t], h], axis=1)
        z = xh @ w + b
        i = _sigmoid(z[:, :hdim])
        f = _sigmoid(z[:, hdim:2 * hdim])
        g = np.tanh(z[:, 2 * hdim:3 * hdim])
        o = _sigmoid(z[:, 3 * hdim:])
        c_prev = c
        c = f * c_prev + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        tape.append((xh, i, f, g, o, c_prev, tc))
    return hs, (tape, w, d)


def lstm_backward(dhs, cache):
    """Backpropagation through time. Returns ``(dx, dw, db)``."""
    tape, w, d = cache
    bsz, steps, hdim = dhs.shape
    dx = np.empty((bsz, steps, d), dtype=dhs.dtype)
    dw = np.zeros_like(w)
    db = np.zeros(w.shape[1], dtype=dhs.dtype)
    dh_next = np.zeros((bsz, hdim), dtype=dhs.dtype)
    dc_next = np.zeros_like(dh_next)
    for t in reversed(range(steps)):
        xh, i, f, g, o, c_prev, tc = tape[t]
        dh = dhs[:, t] + dh_next
        dc = dc_next + dh * o * (1 - tc * tc)
        dz = np.concatenate([dc * g * i * (1 - i),
                             dc * c_prev * f * (1 - f),
                             dc * i * (1 - g * g),
                             dh * tc * o * (1 - o)], axis=1)
        dw += xh.T @ dz
        db += dz.sum(axis=0)
        dxh = dz @ w.T
        dx[:, t] = dxh[:, :d]
        dh_next = dxh[:, d:]
        dc_next = dc * f
    return dx, dw, db
