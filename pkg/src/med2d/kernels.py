"""Compiled loops for depthwise convolution.

Parallel over the batch axis only; kernel-gradient partials are kept per
sample and reduced afterwards in a fixed order, so results do not depend on
the thread count.
"""

import numpy as np
from numba import njit, prange


@njit(cache=True, parallel=True)
def depthwise_forward(xp, k, stride, out_h, out_w):
    n_batch = xp.shape[0]
    kh, kw, channels = k.shape
    out = np.zeros((n_batch, out_h, out_w, channels), dtype=xp.dtype)
    for n in prange(n_batch):
        for i in range(out_h):
            for j in range(out_w):
                for p in range(kh):
                    row = i * stride + p
                    for q in range(kw):
                        col = j * stride + q
                        for c in range(channels):
                            out[n, i, j, c] += xp[n, row, col, c] * k[p, q, c]
    return out


@njit(cache=True, parallel=True)
def depthwise_backward(xp, k, g, stride):
    n_batch, out_h, out_w, channels = g.shape
    kh, kw, _ = k.shape
    dxp = np.zeros_like(xp)
    dk_part = np.zeros((n_batch, kh, kw, channels), dtype=xp.dtype)
    for n in prange(n_batch):
        for i in range(out_h):
            for j in range(out_w):
                for p in range(kh):
                    row = i * stride + p
                    for q in range(kw):
                        col = j * stride + q
                        for c in range(channels):
                            gv = g[n, i, j, c]
                            dxp[n, row, col, c] += gv * k[p, q, c]
                            dk_part[n, p, q, c] += gv * xp[n, row, col, c]
    return dxp, dk_part


@njit(cache=True, parallel=True)
def norm_forward(x, scale, shift, eps):
    """Per-sample, per-channel spatial normalization of an NHWC array.

    Returns (out, xhat, inv_std) with inv_std shaped N x C.
    """
    n_batch, h, w, channels = x.shape
    m = h * w
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty((n_batch, channels), dtype=np.float64)
    for n in prange(n_batch):
        mu = np.zeros(channels, dtype=np.float64)
        for i in range(h):
            for j in range(w):
                for c in range(channels):
                    mu[c] += x[n, i, j, c]
        mu /= m
        var = np.zeros(channels, dtype=np.float64)
        for i in range(h):
            for j in range(w):
                for c in range(channels):
                    d = x[n, i, j, c] - mu[c]
                    var[c] += d * d
        for c in range(channels):
            inv[n, c] = 1.0 / np.sqrt(var[c] / m + eps)
        for i in range(h):
            for j in range(w):
                for c in range(channels):
                    v = (x[n, i, j, c] - mu[c]) * inv[n, c]
                    xhat[n, i, j, c] = v
                    out[n, i, j, c] = v * scale[c] + shift[c]
    return out, xhat, inv


@njit(cache=True, parallel=True)
def norm_backward(g, xhat, inv, scale):
    """Returns (dx, dscale partials N x C, dshift partials N x C)."""
    n_batch, h, w, channels = g.shape
    m = h * w
    dx = np.empty_like(g)
    dscale = np.zeros((n_batch, channels), dtype=np.float64)
    dshift = np.zeros((n_batch, channels), dtype=np.float64)
    for n in prange(n_batch):
        s1 = np.zeros(channels, dtype=np.float64)
        s2 = np.zeros(channels, dtype=np.float64)
        for i in range(h):
            for j in range(w):
                for c in range(channels):
                    gv = g[n, i, j, c]
                    xv = xhat[n, i, j, c]
                    dshift[n, c] += gv
                    dscale[n, c] += gv * xv
                    dxh = gv * scale[c]
                    s1[c] += dxh
                    s2[c] += dxh * xv
        for i in range(h):
            for j in range(w):
                for c in range(channels):
                    dxh = g[n, i, j, c] * scale[c]
                    dx[n, i, j, c] = inv[n, c] / m * (m * dxh - s1[c] - xhat[n, i, j, c] * s2[c])
    return dx, dscale, dshift
