"""Numba kernels mirroring ``_numpy`` one-for-one.

Loops parallelise only over independent outputs, so results do not depend on
thread scheduling. Accumulation order matches the numpy twins, which makes the
two backends bit-identical for every kernel here.
"""
import numpy as np
from numba import njit, prange

from . import _numpy


# The gather is a pure strided copy; numpy's copy loops beat a jitted loop
# here (see benchmarks/bench_kernels.py), so both backends share it.
im2col = _numpy.im2col


@njit(cache=True, parallel=True)
def _col2im(cols, gxp, k, stride, s0, s1, s2, do, ho, wo):
    n, c = gxp.shape[0], gxp.shape[1]
    k3 = k * k * k
    # one (sample, channel) plane per task: writes never collide across tasks
    for nc in prange(n * c):
        i = nc // c
        ch = nc % c
        for a in range(k):
            for b in range(k):
                for e in range(k):
                    row = ch * k3 + (a * k + b) * k + e
                    p = 0
                    for z in range(do):
                        zz = (s0 + z) * stride + a
                        for y in range(ho):
                            yy = (s1 + y) * stride + b
                            for x in range(wo):
                                gxp[i, ch, zz, yy, (s2 + x) * stride + e] += cols[i, row, p]
                                p += 1
    return gxp


def col2im(cols, xp_shape, k, stride, start, size):
    gxp = np.zeros(xp_shape, dtype=cols.dtype)
    return _col2im(np.ascontiguousarray(cols), gxp, k, stride,
                   start[0], start[1], start[2], size[0], size[1], size[2])


@njit(cache=True, parallel=True)
def _dw_forward(xp, w, k, stride, do, ho, wo):
    n, c = xp.shape[0], xp.shape[1]
    out = np.zeros((n, c, do, ho, wo), dtype=xp.dtype)
    for nc in prange(n * c):
        i = nc // c
        ch = nc % c
        j = 0
        for a in range(k):
            for b in range(k):
                for e in range(k):
                    wv = w[ch, j]
                    for z in range(do):
                        for y in range(ho):
                            for x in range(wo):
                                out[i, ch, z, y, x] += wv * xp[i, ch, z * stride + a,
                                                               y * stride + b, x * stride + e]
                    j += 1
    return out


def depthwise_forward(xp, w, k, stride, size):
    return _dw_forward(xp, np.ascontiguousarray(w), k, stride, size[0], size[1], size[2])


@njit(cache=True, parallel=True)
def _dw_backward(xp, w, gout, k, stride):
    n, c = xp.shape[0], xp.shape[1]
    do, ho, wo = gout.shape[2], gout.shape[3], gout.shape[4]
    gxp = np.zeros_like(xp)
    gw = np.zeros((c, k * k * k), dtype=np.float64)
    for ch in prange(c):
        j = 0
        for a in range(k):
            for b in range(k):
                for e in range(k):
                    wv = w[ch, j]
                    acc = 0.0
                    for i in range(n):
                        for z in range(do):
                            for y in range(ho):
                                for x in range(wo):
                                    g = gout[i, ch, z, y, x]
                                    zz = z * stride + a
                                    yy = y * stride + b
                                    xx = x * stride + e
                                    gxp[i, ch, zz, yy, xx] += wv * g
                                    acc += g * xp[i, ch, zz, yy, xx]
                    gw[ch, j] = acc
                    j += 1
    return gxp, gw


def depthwise_backward(xp, w, gout, k, stride):
    gxp, gw = _dw_backward(xp, np.ascontiguousarray(w), np.ascontiguousarray(gout), k, stride)
    return gxp, gw.astype(xp.dtype)


@njit(cache=True, parallel=True)
def _maxpool_forward(x, k, stride, do, ho, wo):
    n, c = x.shape[0], x.shape[1]
    out = np.empty((n, c, do, ho, wo), dtype=x.dtype)
    arg = np.zeros((n, c, do, ho, wo), dtype=np.int32)
    for nc in prange(n * c):
        i = nc // c
        ch = nc % c
        for z in range(do):
            for y in range(ho):
                for xq in range(wo):
                    best = -np.inf
                    bj = 0
                    j = 0
                    for a in range(k):
                        for b in range(k):
                            for e in range(k):
                                v = x[i, ch, z * stride + a, y * stride + b, xq * stride + e]
                                if v > best:
                                    best = v
                                    bj = j
                                j += 1
                    out[i, ch, z, y, xq] = best
                    arg[i, ch, z, y, xq] = bj
    return out, arg


def maxpool_forward(x, k, stride, size):
    return _maxpool_forward(x, k, stride, size[0], size[1], size[2])


@njit(cache=True, parallel=True)
def _maxpool_backward(gout, arg, gx, k, stride):
    n, c = gout.shape[0], gout.shape[1]
    do, ho, wo = gout.shape[2], gout.shape[3], gout.shape[4]
    for nc in prange(n * c):
        i = nc // c
        ch = nc % c
        for z in range(do):
            for y in range(ho):
                for xq in range(wo):
                    j = arg[i, ch, z, y, xq]
                    a = j // (k * k)
                    b = (j // k) % k
                    e = j % k
                    gx[i, ch, z * stride + a, y * stride + b, xq * stride + e] += gout[i, ch, z, y, xq]
    return gx


def maxpool_backward(gout, arg, x_shape, k, stride):
    gx = np.zeros(x_shape, dtype=gout.dtype)
    return _maxpool_backward(np.ascontiguousarray(gout), arg, gx, k, stride)


@njit(cache=True, parallel=True)
def _lif_forward(x, lam, v_th, zero, one):
    steps, m = x.shape
    spikes = np.empty_like(x)
    v_pre = np.empty_like(x)
    for j in prange(m):
        v = zero
        for t in range(steps):
            u = lam * v + x[t, j]
            v_pre[t, j] = u
            if u >= v_th:
                spikes[t, j] = one
                v = zero
            else:
                spikes[t, j] = zero
                v = u
    return spikes, v_pre


def lif_forward(x, lam, v_th):
    dt = x.dtype.type
    return _lif_forward(x, dt(lam), dt(v_th), dt(0), dt(1))


@njit(cache=True, parallel=True)
def _lif_backward(gs, spikes, v_pre, lam, v_th, a, halfwidth, zero, one):
    steps, m = gs.shape
    gx = np.empty_like(gs)
    for j in prange(m):
        gv = zero
        for t in range(steps - 1, -1, -1):
            sg = a if abs(v_pre[t, j] - v_th) < halfwidth else zero
            g = gs[t, j] * sg + gv * (one - spikes[t, j])
            gx[t, j] = g
            gv = lam * g
    return gx


def lif_backward(gs, spikes, v_pre, lam, v_th, a, halfwidth):
    dt = gs.dtype.type
    return _lif_backward(np.ascontiguousarray(gs), spikes, v_pre,
                         dt(lam), dt(v_th), dt(a), dt(halfwidth), dt(0), dt(1))


@njit(cache=True)
def _fnv1a64(buf, h, prime):
    for b in buf:
        h = (h ^ np.uint64(b)) * prime
    return h


def fnv1a64(data):
    """64-bit FNV-1a of a bytes-like object."""
    buf = np.frombuffer(data, dtype=np.uint8)
    return int(_fnv1a64(buf, np.uint64(0xCBF29CE484222325), np.uint64(0x100000001B3)))
