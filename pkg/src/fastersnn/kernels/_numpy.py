"""Pure-numpy reference kernels.

Every function here has a twin in ``_numba`` with the same signature. Arrays
are C-contiguous; spatial regions are given as ``(start, size)`` triples in
output coordinates.
"""
import itertools

import numpy as np


def _offsets(k):
    return itertools.product(range(k), range(k), range(k))


def _window(start, size, stride, offset):
    lo = start * stride + offset
    return slice(lo, lo + (size - 1) * stride + 1, stride)


def im2col(xp, k, stride, start, size):
    """Gather padded input ``(N, C, Dp, Hp, Wp)`` into ``(N, C*k^3, P)``."""
    n, c = xp.shape[:2]
    do, ho, wo = size
    cols = np.empty((n, c, k, k, k, do, ho, wo), dtype=xp.dtype)
    for a, b, e in _offsets(k):
        cols[:, :, a, b, e] = xp[:, :,
                                 _window(start[0], do, stride, a),
                                 _window(start[1], ho, stride, b),
                                 _window(start[2], wo, stride, e)]
    return cols.reshape(n, c * k ** 3, do * ho * wo)


def col2im(cols, xp_shape, k, stride, start, size):
    """Scatter-add ``(N, C*k^3, P)`` columns back into a padded input gradient."""
    n, c = xp_shape[:2]
    do, ho, wo = size
    cols = cols.reshape(n, c, k, k, k, do, ho, wo)
    gxp = np.zeros(xp_shape, dtype=cols.dtype)
    for a, b, e in _offsets(k):
        gxp[:, :,
            _window(start[0], do, stride, a),
            _window(start[1], ho, stride, b),
            _window(start[2], wo, stride, e)] += cols[:, :, a, b, e]
    return gxp


def depthwise_forward(xp, w, k, stride, size):
    """Per-channel correlation; ``w`` has shape ``(C, k^3)``."""
    n, c = xp.shape[:2]
    out = np.zeros((n, c) + tuple(size), dtype=xp.dtype)
    for j, (a, b, e) in enumerate(_offsets(k)):
        out += w[None, :, j, None, None, None] * xp[:, :,
                                                    _window(0, size[0], stride, a),
                                                    _window(0, size[1], stride, b),
                                                    _window(0, size[2], stride, e)]
    return out


def depthwise_backward(xp, w, gout, k, stride):
    c = xp.shape[1]
    size = gout.shape[2:]
    gxp = np.zeros_like(xp)
    gw = np.zeros((c, k ** 3), dtype=np.float64)
    for j, (a, b, e) in enumerate(_offsets(k)):
        sl = (slice(None), slice(None),
              _window(0, size[0], stride, a),
              _window(0, size[1], stride, b),
              _window(0, size[2], stride, e))
        gxp[sl] += w[None, :, j, None, None, None] * gout
        gw[:, j] = np.sum(gout * xp[sl], axis=(0, 2, 3, 4), dtype=np.float64)
    return gxp, gw.astype(xp.dtype)


def maxpool_forward(x, k, stride, size):
    """Returns the pooled map and the winning in-window offset (first max on ties)."""
    best = np.full(x.shape[:2] + tuple(size), -np.inf, dtype=x.dtype)
    arg = np.zeros(best.shape, dtype=np.int32)
    for j, (a, b, e) in enumerate(_offsets(k)):
        v = x[:, :,
              _window(0, size[0], stride, a),
              _window(0, size[1], stride, b),
              _window(0, size[2], stride, e)]
        better = v > best
        best = np.where(better, v, best)
        arg[better] = j
    return best, arg


def maxpool_backward(gout, arg, x_shape, k, stride):
    gx = np.zeros(x_shape, dtype=gout.dtype)
    size = gout.shape[2:]
    for j, (a, b, e) in enumerate(_offsets(k)):
        gx[:, :,
           _window(0, size[0], stride, a),
           _window(0, size[1], stride, b),
           _window(0, size[2], stride, e)] += np.where(arg == j, gout, 0)
    return gx


def lif_forward(x, lam, v_th):
    """Fold LIF dynamics over the leading axis of ``x`` (shape ``(T, M)``).

    Returns ``(spikes, v_pre)``; the membrane starts at zero and is hard-reset
    to zero after a spike.
    """
    lam = x.dtype.type(lam)
    v_th = x.dtype.type(v_th)
    spikes = np.empty_like(x)
    v_pre = np.empty_like(x)
    v = np.zeros(x.shape[1:], dtype=x.dtype)
    for t in range(x.shape[0]):
        u = lam * v + x[t]
        s = (u >= v_th).astype(x.dtype)
        v_pre[t] = u
        spikes[t] = s
        v = u * (1 - s)
    return spikes, v_pre


def lif_backward(gs, spikes, v_pre, lam, v_th, a, halfwidth):
    """STBP backward through the LIF fold with a rectangular surrogate."""
    dt = gs.dtype.type
    lam, v_th, a, halfwidth = dt(lam), dt(v_th), dt(a), dt(halfwidth)
    gx = np.empty_like(gs)
    gv = np.zeros(gs.shape[1:], dtype=gs.dtype)
    for t in range(gs.shape[0] - 1, -1, -1):
        sg = np.where(np.abs(v_pre[t] - v_th) < halfwidth, a, dt(0))
        g = gs[t] * sg + gv * (1 - spikes[t])
        gx[t] = g
        gv = lam * g
    return gx
