"""Leaky integrate-and-fire neurons with hard reset and a rectangular surrogate.

Per step: ``v_pre = lam * v_prev + x_t``, a spike fires where ``v_pre >= v_th``
and the membrane of a firing neuron is reset to zero. In the backward pass the
Heaviside derivative is replaced by ``a`` inside ``|v_pre - v_th| < halfwidth``
and zero elsewhere; the reset is transparent for silent neurons and blocks the
membrane path for firing ones.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels
from .errors import InvalidConfig, NonBinaryValue, ShapeMismatch
from .tensor import Tensor, as_tensor, record


@dataclass(frozen=True)
class LifConfig:
    lam: float = 0.9
    v_th: float = 1.0
    T: int = 2
    surrogate_a: float = 1.0
    surrogate_halfwidth: float = 0.5
    reset: str = "hard_zero"

    def __post_init__(self):
        if not 0 < self.lam <= 1:
            raise InvalidConfig(f"lambda must lie in (0, 1], got {self.lam}")
        if self.v_th <= 0:
            raise InvalidConfig(f"v_th must be positive, got {self.v_th}")
        if int(self.T) != self.T or self.T < 1:
            raise InvalidConfig(f"T must be a positive integer, got {self.T}")
        if self.surrogate_a <= 0 or self.surrogate_halfwidth <= 0:
            raise InvalidConfig("surrogate height and half-width must be positive")
        if self.reset != "hard_zero":
            raise InvalidConfig(f"unsupported reset mode {self.reset!r}")

    def to_dict(self):
        return asdict(self)


def lif_step(cfg, v_prev, x_t):
    """One Euler step on plain arrays. Returns ``(v_next, spikes)``."""
    v_prev = np.asarray(v_prev)
    x_t = np.asarray(x_t)
    if v_prev.shape != x_t.shape:
        raise ShapeMismatch(f"membrane {v_prev.shape} vs input {x_t.shape}")
    dt = np.result_type(v_prev.dtype, x_t.dtype, np.float32).type
    v_pre = dt(cfg.lam) * v_prev.astype(dt) + x_t.astype(dt)
    s = (v_pre >= dt(cfg.v_th)).astype(dt)
    return v_pre * (1 - s), s


def lif_sequence(cfg, inputs):
    """Run LIF over the leading (time) axis of ``inputs``; membrane starts at 0.

    Differentiable: the returned spike tensor carries an STBP backward rule.
    """
    x = as_tensor(inputs)
    if x.ndim < 1:
        raise ShapeMismatch("lif_sequence needs a leading time axis")
    steps = x.shape[0]
    flat = x.data.reshape(steps, -1)
    spikes, v_pre = kernels.lif_forward(np.ascontiguousarray(flat), cfg.lam, cfg.v_th)

    def bw(g):
        gx = kernels.lif_backward(g.reshape(steps, -1), spikes, v_pre, cfg.lam, cfg.v_th,
                                  cfg.surrogate_a, cfg.surrogate_halfwidth)
        return (gx.reshape(x.shape),)
    out = record("lif", spikes.reshape(x.shape), (x,), bw)
    out.is_spike = True
    return out


def surrogate_grad(cfg, v_pre):
    """Rectangle stand-in for dS/dV: ``a`` where ``|v_pre - v_th| < halfwidth``, else 0."""
    v = np.asarray(v_pre.data if isinstance(v_pre, Tensor) else v_pre)
    dt = v.dtype.type if v.dtype.kind == "f" else np.float64
    inside = np.abs(v - dt(cfg.v_th)) < dt(cfg.surrogate_halfwidth)
    return np.where(inside, dt(cfg.surrogate_a), dt(0))


def count_spikes(spikes, tol=1e-6):
    """Return ``(n_active, n_total)`` for a binary spike tensor."""
    s = np.asarray(spikes.data if isinstance(spikes, Tensor) else spikes)
    ones = np.abs(s - 1) <= tol
    if not np.all(ones | (np.abs(s) <= tol)):
        raise NonBinaryValue("spike tensor holds values other than 0 and 1")
    return int(np.count_nonzero(ones)), int(s.size)
