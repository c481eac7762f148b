"""Differentiable tensor operations used by the network.

Spatial tensors are laid out ``(N, C, D, H, W)``. Convolution is
cross-correlation (no kernel flip). Reductions accumulate in float64.
"""
import math

import numpy as np

from . import kernels
from .errors import LabelOutOfRange, NonIntegralOutputExtent, ShapeMismatch
from .tensor import Tensor, as_tensor, record

# upper bound on im2col buffer elements per chunk (128 MiB of float32)
COL_LIMIT = 1 << 25

_GELU_C = math.sqrt(2.0 / math.pi)


def _triple(v):
    return tuple(v) if isinstance(v, (tuple, list)) else (v, v, v)


def out_extent(n, k, stride, padding):
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise NonIntegralOutputExtent(
            f"extent {n} with k={k}, stride={stride}, padding={padding} does not tile")
    return span // stride + 1


def _check5(x, what):
    if x.ndim != 5:
        raise ShapeMismatch(f"{what} expects (N, C, D, H, W), got {x.shape}")


def _pad(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))


def _chunks(n, per_sample, size):
    """Split (samples, output depth) so that one im2col buffer stays under COL_LIMIT."""
    if per_sample * n <= COL_LIMIT:
        yield 0, n, 0, size[0]
        return
    if per_sample <= COL_LIMIT:
        step = max(1, COL_LIMIT // per_sample)
        for i in range(0, n, step):
            yield i, min(n, i + step), 0, size[0]
        return
    plane = per_sample // size[0]
    dz = max(1, COL_LIMIT // plane)
    for i in range(n):
        for z in range(0, size[0], dz):
            yield i, i + 1, z, min(size[0], z + dz)


def conv3d(x, w, b=None, stride=1, padding=0, region=None):
    """3-D cross-correlation with optional restriction to an output sub-box.

    ``region=(start, size)`` computes only output voxels
    ``start[i] <= o_i < start[i] + size[i]``; the result then has spatial shape
    ``size``. Values are identical to slicing the full output.
    """
    x, w = as_tensor(x), as_tensor(w)
    _check5(x, "conv3d")
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    if w.ndim != 5 or w.shape[2:] != (k, k, k):
        raise ShapeMismatch(f"conv3d weight must be (C_out, C_in, k, k, k), got {w.shape}")
    if x.shape[1] != ci:
        raise ShapeMismatch(f"conv3d input has {x.shape[1]} channels, weight expects {ci}")
    if b is not None:
        b = as_tensor(b, x.dtype)
        if b.shape != (co,):
            raise ShapeMismatch(f"conv3d bias must be ({co},), got {b.shape}")
    full = tuple(out_extent(n, k, stride, padding) for n in x.shape[2:])
    if region is None:
        start, size = (0, 0, 0), full
    else:
        start, size = tuple(region[0]), tuple(region[1])
        if any(s < 0 or n < 1 or s + n > f for s, n, f in zip(start, size, full)):
            raise ShapeMismatch(f"region {region} outside output extents {full}")
    n = x.shape[0]
    dt = x.dtype
    w2 = w.data.reshape(co, ci * k ** 3)
    pointwise = k == 1 and stride == 1 and padding == 0 and region is None

    if pointwise:
        xf = x.data.reshape(n, ci, -1)
        out = np.matmul(w2, xf)
        if b is not None:
            out += b.data[None, :, None]
        out = out.reshape((n, co) + full)

        def bw(g):
            g = g.reshape(n, co, -1)
            gx = np.matmul(w2.T, g).reshape(x.shape) if x.requires_grad else None
            gw = np.sum(np.matmul(g, xf.transpose(0, 2, 1)), axis=0, dtype=np.float64)
            gb = np.sum(g, axis=(0, 2), dtype=np.float64).astype(dt) if b is not None else None
            return gx, gw.astype(dt).reshape(w.shape), gb
        inputs = (x, w) + ((b,) if b is not None else ())
        return record("conv3d", out, inputs, lambda g: bw(g)[:len(inputs)])

    xp = _pad(x.data, padding)
    per_sample = ci * k ** 3 * size[0] * size[1] * size[2]
    out = np.empty((n, co) + size, dtype=dt)
    for i0, i1, z0, z1 in _chunks(n, per_sample, size):
        sub = (z1 - z0, size[1], size[2])
        cols = kernels.im2col(xp[i0:i1], k, stride, (start[0] + z0, start[1], start[2]), sub)
        out[i0:i1, :, z0:z1] = np.matmul(w2, cols).reshape((i1 - i0, co) + sub)
    if b is not None:
        out += b.data[None, :, None, None, None]

    def bw(g):
        gw = np.zeros(w2.shape, dtype=np.float64)
        gxp = np.zeros(xp.shape, dtype=dt) if x.requires_grad else None
        for i0, i1, z0, z1 in _chunks(n, per_sample, size):
            sub = (z1 - z0, size[1], size[2])
            st = (start[0] + z0, start[1], start[2])
            cols = kernels.im2col(xp[i0:i1], k, stride, st, sub)
            gc = np.ascontiguousarray(g[i0:i1, :, z0:z1]).reshape(i1 - i0, co, -1)
            gw += np.sum(np.matmul(gc, cols.transpose(0, 2, 1)), axis=0, dtype=np.float64)
            if gxp is not None:
                gxp[i0:i1] += kernels.col2im(np.matmul(w2.T, gc), xp[i0:i1].shape,
                                             k, stride, st, sub)
        gx = None
        if gxp is not None:
            p = padding
            gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3], p:p + x.shape[4]] if p else gxp
        gb = np.sum(g, axis=(0, 2, 3, 4), dtype=np.float64).astype(dt) if b is not None else None
        res = (gx, gw.astype(dt).reshape(w.shape))
        return res + ((gb,) if b is not None else ())
    inputs = (x, w) + ((b,) if b is not None else ())
    return record("conv3d", out, inputs, bw)


def depthwise_conv3d(x, w, b=None, stride=1, padding=0):
    """One ``k^3`` filter per channel, no cross-channel mixing. ``w``: ``(C, 1, k, k, k)``."""
    x, w = as_tensor(x), as_tensor(w)
    _check5(x, "depthwise_conv3d")
    c, k = x.shape[1], w.shape[-1]
    if w.shape != (c, 1, k, k, k):
        raise ShapeMismatch(f"depthwise weight must be ({c}, 1, k, k, k), got {w.shape}")
    if b is not None:
        b = as_tensor(b, x.dtype)
        if b.shape != (c,):
            raise ShapeMismatch(f"depthwise bias must be ({c},), got {b.shape}")
    size = tuple(out_extent(n, k, stride, padding) for n in x.shape[2:])
    dt = x.dtype
    xp = _pad(x.data, padding)
    w2 = w.data.reshape(c, k ** 3)
    out = kernels.depthwise_forward(xp, w2, k, stride, size)
    if b is not None:
        out += b.data[None, :, None, None, None]

    def bw(g):
        gxp, gw = kernels.depthwise_backward(xp, w2, np.ascontiguousarray(g), k, stride)
        p = padding
        gx = gxp[:, :, p:p + x.shape[2], p:p + x.shape[3], p:p + x.shape[4]] if p else gxp
        res = (gx, gw.reshape(w.shape))
        if b is not None:
            res += (np.sum(g, axis=(0, 2, 3, 4), dtype=np.float64).astype(dt),)
        return res
    inputs = (x, w) + ((b,) if b is not None else ())
    return record("depthwise_conv3d", out, inputs, bw)


def maxpool3d(x, k=2, stride=None):
    """Window maximum; the gradient goes to the first maximal element of each window."""
    x = as_tensor(x)
    _check5(x, "maxpool3d")
    stride = k if stride is None else stride
    if k == 1 and stride == 1:
        return x
    size = tuple(out_extent(n, k, stride, 0) for n in x.shape[2:])
    out, arg = kernels.maxpool_forward(x.data, k, stride, size)
    shape = x.shape
    return record("maxpool3d", out, (x,),
                  lambda g: (kernels.maxpool_backward(g, arg, shape, k, stride),))


def global_avg_pool(x):
    """Spatial mean per (sample, channel): ``(N, C, D, H, W) -> (N, C, 1, 1, 1)``."""
    x = as_tensor(x)
    _check5(x, "global_avg_pool")
    shape = x.shape
    m = shape[2] * shape[3] * shape[4]
    out = np.mean(x.data, axis=(2, 3, 4), keepdims=True, dtype=np.float64).astype(x.dtype)
    return record("global_avg_pool", out, (x,),
                  lambda g: (np.broadcast_to(g / x.dtype.type(m), shape).copy(),))


def batchnorm3d(x, gamma, beta, running_mean, running_var, training=True,
                momentum=0.1, eps=1e-5, groups=1):
    """Batch normalisation over (N, D, H, W) per channel.

    With ``groups > 1`` the leading axis is read as ``groups`` consecutive
    batches (one per timestep); each gets its own statistics while sharing
    ``gamma``/``beta``. Running statistics are numpy arrays updated in place,
    group by group, using the unbiased variance.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _check5(x, "batchnorm3d")
    n, c = x.shape[:2]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeMismatch(f"batchnorm params must be ({c},)")
    if n % groups:
        raise ShapeMismatch(f"batch {n} not divisible into {groups} groups")
    dt = x.dtype
    xg = x.data.reshape((groups, n // groups, c) + x.shape[2:])
    axes = (1, 3, 4, 5)
    cshape = (1, 1, c, 1, 1, 1)
    gam = gamma.data.astype(np.float64).reshape(cshape)

    if training:
        cnt = xg.size // (groups * c)
        mu = np.mean(xg, axis=axes, dtype=np.float64, keepdims=True)
        var = np.mean(np.square(xg - mu), axis=axes, dtype=np.float64, keepdims=True)
        for t in range(groups):
            unbiased = var[t].reshape(c) * (cnt / max(cnt - 1, 1))
            running_mean *= 1 - momentum
            running_mean += momentum * mu[t].reshape(c)
            running_var *= 1 - momentum
            running_var += momentum * unbiased
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (xg - mu) * inv
    else:
        mu = running_mean.astype(np.float64).reshape(cshape)
        inv = 1.0 / np.sqrt(running_var.astype(np.float64).reshape(cshape) + eps)
        xhat = (xg - mu) * inv
    out = (gam * xhat + beta.data.astype(np.float64).reshape(cshape)).astype(dt).reshape(x.shape)

    def bw(g):
        gg = g.reshape(xg.shape).astype(np.float64)
        dgamma = np.sum(gg * xhat, axis=(0,) + axes).astype(dt)
        dbeta = np.sum(gg, axis=(0,) + axes).astype(dt)
        if training:
            cnt = xg.size // (groups * c)
            sg = np.sum(gg, axis=axes, keepdims=True)
            sgx = np.sum(gg * xhat, axis=axes, keepdims=True)
            gx = gam * inv / cnt * (cnt * gg - sg - xhat * sgx)
        else:
            gx = gg * gam * inv
        return gx.astype(dt).reshape(x.shape), dgamma, dbeta
    return record("batchnorm3d", out, (x, gamma, beta), bw)


def gelu(x):
    """Tanh-approximated GELU."""
    x = as_tensor(x)
    xd = x.data.astype(np.float64)
    u = _GELU_C * (xd + 0.044715 * xd ** 3)
    th = np.tanh(u)
    out = (0.5 * xd * (1.0 + th)).astype(x.dtype)

    def bw(g):
        d = 0.5 * (1.0 + th) + 0.5 * xd * (1.0 - th * th) * _GELU_C * (1.0 + 3 * 0.044715 * xd * xd)
        return ((g * d).astype(x.dtype),)
    return record("gelu", out, (x,), bw)


def sigmoid(x):
    x = as_tensor(x)
    xd = x.data.astype(np.float64)
    e = np.exp(-np.abs(xd))
    s = np.where(xd >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    out = s.astype(x.dtype)
    return record("sigmoid", out, (x,), lambda g: ((g * s * (1.0 - s)).astype(x.dtype),))


def activation(kind, x):
    if kind == "gelu":
        return gelu(x)
    if kind == "sigmoid":
        return sigmoid(x)
    raise ValueError(f"unknown activation {kind!r}")


def linear(x, w, b=None):
    """Affine map ``x @ w.T + b`` for ``x: (B, F_in)``, ``w: (F_out, F_in)``."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None:
        b = as_tensor(b, x.dtype)
        if b.shape != (w.shape[0],):
            raise ShapeMismatch(f"linear bias must be ({w.shape[0]},), got {b.shape}")
    out = x.data @ w.data.T
    if b is not None:
        out = out + b.data

    def bw(g):
        res = (g @ w.data, (g.T.astype(np.float64) @ x.data).astype(x.dtype))
        if b is not None:
            res += (np.sum(g, axis=0, dtype=np.float64).astype(x.dtype),)
        return res
    inputs = (x, w) + ((b,) if b is not None else ())
    return record("linear", out, inputs, bw)


def crop(x, start, size):
    """Spatial sub-box ``x[:, :, s0:s0+n0, s1:s1+n1, s2:s2+n2]``."""
    x = as_tensor(x)
    sl = (slice(None), slice(None)) + tuple(slice(s, s + n) for s, n in zip(start, size))
    shape = x.shape

    def bw(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[sl] = g
        return (gx,)
    return record("crop", np.ascontiguousarray(x.data[sl]), (x,), bw)


def embed(x, start, full):
    """Place ``x`` at ``start`` inside a zero tensor of spatial extents ``full``."""
    x = as_tensor(x)
    sl = (slice(None), slice(None)) + tuple(slice(s, s + n) for s, n in zip(start, x.shape[2:]))
    out = np.zeros(x.shape[:2] + tuple(full), dtype=x.dtype)
    out[sl] = x.data
    return record("embed", out, (x,), lambda g: (np.ascontiguousarray(g[sl]),))


def cross_entropy_steps(logits, labels):
    """Mean over steps and batch of softmax cross-entropy; ``logits: (T, B, K)``."""
    logits = as_tensor(logits)
    if logits.ndim != 3:
        raise ShapeMismatch(f"logits must be (T, B, K), got {logits.shape}")
    steps, bsz, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape != (bsz,):
        raise ShapeMismatch(f"expected {bsz} labels, got {labels.shape[0]}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    z = logits.data.astype(np.float64)
    m = z.max(axis=2, keepdims=True)
    lse = m + np.log(np.sum(np.exp(z - m), axis=2, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, labels[None, :, None].repeat(steps, 0), axis=2)
    loss = -picked.mean()

    def bw(g):
        p = np.exp(logp)
        p[np.arange(steps)[:, None], np.arange(bsz)[None, :], labels[None, :]] -= 1.0
        return ((p * (float(g.reshape(-1)[0]) / (steps * bsz))).astype(logits.dtype),)
    return record("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), bw)


__all__ = ["conv3d", "depthwise_conv3d", "maxpool3d", "global_avg_pool", "batchnorm3d",
           "gelu", "sigmoid", "activation", "linear", "crop", "embed",
           "cross_entropy_steps", "out_extent", "Tensor"]
