"""Parameterised layers: convolutions, batch norm, LIF sites, SWA, Faster SNN block, MSF.

Activations flow time-major with the time axis folded into the batch axis:
``(T*B, C, D, H, W)``. Stateless layers treat that as an ordinary batch;
LIF sites unfold it to run their temporal recurrence, and batch norm keeps
one set of statistics per timestep.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from . import functional as F
from .errors import OddSpatialExtent, ShapeMismatch
from .lif import count_spikes, lif_sequence
from .tensor import Tensor, as_tensor, mean, reshape, take


@dataclass
class Ctx:
    """Per-forward settings shared by every layer."""

    T: int = 1
    training: bool = False
    recorder: object = None          # efficiency audit sink, see efficiency.Recorder
    attention: dict = None           # name -> spatial attention map, filled when not None
    spikes: dict = field(default_factory=dict)   # LIF site -> [n_active, n_total]


class Module:
    """Minimal parameter container.

    Parameters are ``Tensor`` attributes with ``requires_grad``; child modules
    are ``Module`` attributes or lists of them. Registration order is attribute
    assignment order, which fixes initialisation and checkpoint layout.
    """

    def __init__(self, name=""):
        self.name = name
        self.buffers = {}

    def _children(self):
        for key, val in vars(self).items():
            if isinstance(val, Module):
                yield key, val
            elif isinstance(val, list):
                for i, m in enumerate(val):
                    if isinstance(m, Module):
                        yield f"{key}.{i}", m

    def named_parameters(self, prefix=""):
        for key, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + key, val
        for key, child in self._children():
            yield from child.named_parameters(f"{prefix}{key}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for key, val in self.buffers.items():
            yield prefix + key, val
        for key, child in self._children():
            yield from child.named_buffers(f"{prefix}{key}.")

    def modules(self):
        yield self
        for _, child in self._children():
            yield from child.modules()

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None


def _uniform(rng, shape, fan_in, dtype):
    bound = math.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, dtype=dtype)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)


def _input_spikes(x):
    if getattr(x, "is_spike", False):
        return count_spikes(x)
    return None


class Conv3d(Module):
    def __init__(self, c_in, c_out, k, padding=0, rng=None, dtype=np.float32, name=""):
        super().__init__(name)
        self.c_in, self.c_out, self.k, self.padding = c_in, c_out, k, padding
        rng = rng or np.random.default_rng(0)
        self.weight = _uniform(rng, (c_out, c_in, k, k, k), c_in * k ** 3, dtype)
        self.bias = _zeros((c_out,), dtype)

    def __call__(self, x, ctx=None, region=None):
        spk = _input_spikes(x) if ctx is not None and ctx.recorder is not None else None
        y = F.conv3d(x, self.weight, self.bias, stride=1, padding=self.padding, region=region)
        if ctx is not None and ctx.recorder is not None:
            ctx.recorder.conv(self.name, self.c_in, self.c_out, self.k, y.shape[2:], y.shape[0], spk)
        return y


class DepthwiseConv3d(Module):
    def __init__(self, c, k, padding=0, rng=None, dtype=np.float32, name=""):
        super().__init__(name)
        self.c, self.k, self.padding = c, k, padding
        rng = rng or np.random.default_rng(0)
        self.weight = _uniform(rng, (c, 1, k, k, k), k ** 3, dtype)
        self.bias = _zeros((c,), dtype)

    def __call__(self, x, ctx=None):
        spk = _input_spikes(x) if ctx is not None and ctx.recorder is not None else None
        y = F.depthwise_conv3d(x, self.weight, self.bias, stride=1, padding=self.padding)
        if ctx is not None and ctx.recorder is not None:
            ctx.recorder.conv(self.name, self.c, 1, self.k, y.shape[2:], y.shape[0], spk)
        return y


class Linear(Module):
    def __init__(self, f_in, f_out, rng=None, dtype=np.float32, name=""):
        super().__init__(name)
        self.f_in, self.f_out = f_in, f_out
        rng = rng or np.random.default_rng(0)
        self.weight = _uniform(rng, (f_out, f_in), f_in, dtype)
        self.bias = _zeros((f_out,), dtype)

    def __call__(self, x, ctx=None):
        y = F.linear(x, self.weight, self.bias)
        if ctx is not None and ctx.recorder is not None:
            ctx.recorder.conv(self.name, self.f_in, self.f_out, 1, (1, 1, 1), y.shape[0], None)
        return y


class BatchNorm3d(Module):
    def __init__(self, c, momentum=0.1, eps=1e-5, dtype=np.float32, name=""):
        super().__init__(name)
        self.momentum, self.eps = momentum, eps
        self.gamma = Tensor(np.ones(c), requires_grad=True, dtype=dtype)
        self.beta = _zeros((c,), dtype)
        self.buffers = {"running_mean": np.zeros(c, dtype=dtype),
                        "running_var": np.ones(c, dtype=dtype)}

    def __call__(self, x, ctx):
        return F.batchnorm3d(x, self.gamma, self.beta, self.buffers["running_mean"],
                             self.buffers["running_var"], training=ctx.training,
                             momentum=self.momentum, eps=self.eps, groups=ctx.T)


class LIF(Module):
    """LIF site over folded ``(steps*B, ...)`` activations; ``enabled=False`` is identity."""

    def __init__(self, cfg, enabled=True, name=""):
        super().__init__(name)
        self.cfg = cfg
        self.enabled = enabled

    def __call__(self, x, ctx, steps):
        if not self.enabled:
            return x
        shape = x.shape
        s = lif_sequence(self.cfg, reshape(x, (steps, shape[0] // steps) + shape[1:]))
        out = reshape(s, shape)
        active, total = int(np.count_nonzero(s.data)), s.size
        acc = ctx.spikes.setdefault(self.name, [0, 0])
        acc[0] += active
        acc[1] += total
        if ctx.recorder is not None:
            ctx.recorder.lif(self.name, active, total)
        return out


class SWA(Module):
    """Spiking weighted attention: ``x * (alpha * W_c + beta * W_s)``.

    Channel branch: GAP -> 1x1 conv C->C/4 -> LIF -> 1x1 conv C/4->C -> sigmoid.
    Spatial branch: 1x1 conv C->C/4 -> LIF -> 1x1 conv C/4->1 -> sigmoid.
    Each LIF runs a single step from a zero membrane at every timestep.
    """

    def __init__(self, c, lif_cfg, use_lif=True, rng=None, dtype=np.float32, name=""):
        super().__init__(name)
        if c % 4:
            raise ShapeMismatch(f"SWA needs channels divisible by 4, got {c}")
        q = c // 4
        self.c = c
        self.ch_reduce = Conv3d(c, q, 1, rng=rng, dtype=dtype, name=f"{name}.ch_reduce")
        self.ch_lif = LIF(lif_cfg, use_lif, name=f"{name}.ch_lif")
        self.ch_restore = Conv3d(q, c, 1, rng=rng, dtype=dtype, name=f"{name}.ch_restore")
        self.sp_reduce = Conv3d(c, q, 1, rng=rng, dtype=dtype, name=f"{name}.sp_reduce")
        self.sp_lif = LIF(lif_cfg, use_lif, name=f"{name}.sp_lif")
        self.sp_project = Conv3d(q, 1, 1, rng=rng, dtype=dtype, name=f"{name}.sp_project")
        self.alpha = Tensor(np.full(1, 0.5), requires_grad=True, dtype=dtype)
        self.beta = Tensor(np.full(1, 0.5), requires_grad=True, dtype=dtype)

    def maps(self, x, ctx):
        wc = F.sigmoid(self.ch_restore(self.ch_lif(self.ch_reduce(F.global_avg_pool(x), ctx),
                                                   ctx, 1), ctx))
        ws = F.sigmoid(self.sp_project(self.sp_lif(self.sp_reduce(x, ctx), ctx, 1), ctx))
        return wc, ws

    def __call__(self, x, ctx, maps=None):
        if x.shape[1] != self.c:
            raise ShapeMismatch(f"SWA built for {self.c} channels, got {x.shape[1]}")
        wc, ws = self.maps(x, ctx) if maps is None else (as_tensor(maps[0], x.dtype),
                                                         as_tensor(maps[1], x.dtype))
        if ctx.attention is not None:
            ctx.attention[self.name] = ws.data.copy()
        return x * (self.alpha * wc + self.beta * ws)


def center_bounds(n, fraction):
    """Start index and length of the core slab along an axis of length ``n``."""
    start = math.floor(round(n * (1 - fraction) / 2, 9))
    size = math.ceil(round(n * fraction, 9))
    return start, min(size, n - start)


def center_mask(dims, fraction):
    """Binary mask with ones on the centred core box, zeros on the edge shell."""
    if not 0 < fraction <= 1:
        raise ValueError(f"center fraction must lie in (0, 1], got {fraction}")
    m = np.zeros(tuple(dims), dtype=np.float32)
    (a, na), (b, nb), (c, nc) = (center_bounds(n, fraction) for n in dims)
    m[a:a + na, b:b + nb, c:c + nc] = 1
    return m


class FasterBlock(Module):
    """Region-adaptive block followed by 2x max pooling.

    When the input width differs from the block width, a 3x3x3 conv + BN + GELU
    entry stage adapts the channels first. Then ``F_out`` takes the dense
    3x3x3 conv on the core box and the depthwise-separable path on the edge,
    ``Y = X + LIF(BN(F_out))``, optional SWA on ``Y``, and 2x max pooling.
    The dense conv is only evaluated on the core box.
    """

    def __init__(self, c_in, c_out, lif_cfg, center_fraction=0.5, swa=True, use_lif=True,
                 literal_eq3=False, rng=None, dtype=np.float32, name=""):
        super().__init__(name)
        self.c_in, self.c_out = c_in, c_out
        self.center_fraction = center_fraction
        self.literal_eq3 = literal_eq3
        if c_in != c_out:
            self.entry = Conv3d(c_in, c_out, 3, padding=1, rng=rng, dtype=dtype, name=f"{name}.entry")
            self.entry_bn = BatchNorm3d(c_out, dtype=dtype, name=f"{name}.entry_bn")
        else:
            self.entry = None
            self.entry_bn = None
        self.center = Conv3d(c_out, c_out, 3, padding=1, rng=rng, dtype=dtype, name=f"{name}.center")
        self.edge_dw = DepthwiseConv3d(c_out, 3, padding=1, rng=rng, dtype=dtype, name=f"{name}.edge_dw")
        self.edge_pw = Conv3d(c_out, c_out, 1, rng=rng, dtype=dtype, name=f"{name}.edge_pw")
        self.bn = BatchNorm3d(c_out, dtype=dtype, name=f"{name}.bn")
        self.lif = LIF(lif_cfg, use_lif, name=f"{name}.lif")
        self.swa = SWA(c_out, lif_cfg, use_lif, rng=rng, dtype=dtype, name=f"{name}.swa") if swa else None

    def mixed(self, x, ctx):
        """``F_out``: core from the dense conv, edge from the depthwise-separable path."""
        dims = x.shape[2:]
        bounds = [center_bounds(n, self.center_fraction) for n in dims]
        start = tuple(s for s, _ in bounds)
        size = tuple(n for _, n in bounds)
        core = F.embed(self.center(x, ctx, region=(start, size)), start, dims)
        edge = self.edge_pw(self.edge_dw(x, ctx), ctx)
        m = center_mask(dims, self.center_fraction)[None, None]
        if self.literal_eq3:
            return core + edge * m.astype(x.dtype)
        return core + edge * (1 - m).astype(x.dtype)

    def residual(self, x, ctx):
        """Pre-pool output ``Y`` (after SWA when present)."""
        if self.entry is not None:
            x = F.gelu(self.entry_bn(self.entry(x, ctx), ctx))
        y = x + self.lif(self.bn(self.mixed(x, ctx), ctx), ctx, ctx.T)
        if self.swa is not None:
            y = self.swa(y, ctx)
        return y

    def __call__(self, x, ctx):
        if x.shape[1] != self.c_in:
            raise ShapeMismatch(f"{self.name} expects {self.c_in} channels, got {x.shape[1]}")
        if any(n % 2 for n in x.shape[2:]):
            raise OddSpatialExtent(f"{self.name} needs even spatial extents, got {x.shape[2:]}")
        return F.maxpool3d(self.residual(x, ctx), 2, 2)


class MSF(Module):
    """Four-level fusion: 1x1 conv to a common width, max-pool to the deepest
    level's extents, scale by a learnable weight, and sum."""

    def __init__(self, channels, out_channels=64, use_all=True, rng=None, dtype=np.float32, name="msf"):
        super().__init__(name)
        if len(channels) != 4:
            raise ShapeMismatch("MSF expects exactly four levels")
        self.use_all = use_all
        # without fusion only the deepest level is aligned; the others get no conv
        self.align = [Conv3d(c, out_channels, 1, rng=rng, dtype=dtype, name=f"{name}.align.{i}")
                      if use_all or i == 3 else None for i, c in enumerate(channels)]
        self.weights = Tensor(np.ones(4), requires_grad=True, dtype=dtype)

    def __call__(self, levels, ctx, aligned=None):
        if len(levels) != 4:
            raise ShapeMismatch(f"MSF expects 4 level outputs, got {len(levels)}")
        target = levels[3].shape[2:]
        fused = None
        for i, lvl in enumerate(levels):
            if not self.use_all and i < 3:
                continue
            y = self.align[i](lvl, ctx) if aligned is None else as_tensor(aligned[i], lvl.dtype)
            ratio = 2 ** (3 - i)
            if y.shape[2:] != tuple(n * ratio for n in target):
                raise ShapeMismatch(f"level {i} extents {y.shape[2:]} do not pool to {target}")
            term = F.maxpool3d(y, ratio, ratio) * take(self.weights, i)
            fused = term if fused is None else fused + term
        return fused


def temporal_average(per_step):
    """Mean over the leading time axis."""
    return mean(as_tensor(per_step), axis=0)


# functional entry points mirroring the layer classes
def swa_forward(p, x, ctx=None, maps=None):
    return p(as_tensor(x), ctx or Ctx(), maps=maps)


def faster_block_forward(p, x, ctx=None):
    return p(as_tensor(x), ctx or Ctx())


def msf_fuse(p, level_outputs, ctx=None, aligned=None):
    return p([as_tensor(x) for x in level_outputs], ctx or Ctx(), aligned=aligned)
