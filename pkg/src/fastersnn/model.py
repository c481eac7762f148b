"""Full network: stem, four Faster SNN blocks (SWA in the first three), MSF, head."""
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from . import functional as F
from .errors import InvalidConfig, ShapeMismatch
from .layers import (MSF, BatchNorm3d, Conv3d, Ctx, FasterBlock, Linear, Module,
                     temporal_average)
from .lif import LifConfig
from .tensor import Tensor, as_tensor, reshape

# reported size of the reference model, in millions of trainable parameters
REFERENCE_PARAMS_M = 43.11


@dataclass(frozen=True)
class ModelConfig:
    input_dims: tuple = (64, 64, 64)
    in_channels: int = 1
    stage_channels: tuple = (64, 128, 256, 512)
    swa_stages: tuple = (True, True, True, False)
    msf_out_channels: int = 64
    n_classes: int = 3
    lif: LifConfig = field(default_factory=LifConfig)
    center_fraction: float = 0.5
    classifier_hidden: int = 0
    seed: int = 0
    # ablation switches
    use_lif: bool = True
    use_msf: bool = True
    literal_eq3: bool = False

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(n) for n in self.input_dims))
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "swa_stages", tuple(bool(s) for s in self.swa_stages))
        if isinstance(self.lif, dict):
            object.__setattr__(self, "lif", LifConfig(**self.lif))
        self.validate()

    def validate(self):
        if len(self.input_dims) != 3 or any(n < 16 or n % 16 for n in self.input_dims):
            raise InvalidConfig(f"input extents must be positive multiples of 16, got {self.input_dims}")
        if len(self.stage_channels) != 4 or any(c < 4 or c % 4 for c in self.stage_channels):
            raise InvalidConfig(f"need four stage widths divisible by 4, got {self.stage_channels}")
        if len(self.swa_stages) != 4:
            raise InvalidConfig("swa_stages needs four entries")
        if self.in_channels < 1 or self.msf_out_channels < 1 or self.n_classes < 2:
            raise InvalidConfig("channel and class counts must be positive (n_classes >= 2)")
        if not 0 < self.center_fraction <= 1:
            raise InvalidConfig(f"center_fraction must lie in (0, 1], got {self.center_fraction}")
        if self.classifier_hidden < 0:
            raise InvalidConfig("classifier_hidden must be >= 0")

    @property
    def T(self):
        return self.lif.T

    def with_(self, **kw):
        return replace(self, **kw)

    def to_dict(self):
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        d["stage_channels"] = list(self.stage_channels)
        d["swa_stages"] = list(self.swa_stages)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ForwardOutput:
    logits_per_step: Tensor     # (T, B, n_classes)
    fused_logits: Tensor        # (B, n_classes)
    spike_stats: dict           # LIF site -> (n_active, n_total)
    levels: list = None         # per-block outputs, when requested
    attention: dict = None      # SWA spatial maps, when requested


class FasterSNN(Module):
    def __init__(self, cfg, dtype=np.float32):
        super().__init__("model")
        self.cfg = cfg
        self.training = False
        rng = np.random.default_rng(cfg.seed)
        c0 = cfg.stage_channels[0]
        self.stem = Conv3d(cfg.in_channels, c0, 3, padding=1, rng=rng, dtype=dtype, name="stem")
        self.stem_bn = BatchNorm3d(c0, dtype=dtype, name="stem_bn")
        self.blocks = []
        c_in = c0
        for i, c in enumerate(cfg.stage_channels):
            self.blocks.append(FasterBlock(
                c_in, c, cfg.lif, center_fraction=cfg.center_fraction, swa=cfg.swa_stages[i],
                use_lif=cfg.use_lif, literal_eq3=cfg.literal_eq3, rng=rng, dtype=dtype,
                name=f"blocks.{i}"))
            c_in = c
        self.msf = MSF(cfg.stage_channels, cfg.msf_out_channels, use_all=cfg.use_msf,
                       rng=rng, dtype=dtype)
        m = cfg.msf_out_channels
        if cfg.classifier_hidden:
            self.head_hidden = Linear(m, cfg.classifier_hidden, rng=rng, dtype=dtype, name="head_hidden")
            self.head = Linear(cfg.classifier_hidden, cfg.n_classes, rng=rng, dtype=dtype, name="head")
        else:
            self.head_hidden = None
            self.head = Linear(m, cfg.n_classes, rng=rng, dtype=dtype, name="head")

    def train(self):
        self.training = True
        return self

    def eval(self):
        self.training = False
        return self

    def classify(self, fmap, ctx):
        """GAP + classifier on ``(N, C, d, h, w)`` maps -> ``(N, n_classes)``."""
        z = reshape(F.global_avg_pool(fmap), (fmap.shape[0], fmap.shape[1]))
        if self.head_hidden is not None:
            z = F.gelu(self.head_hidden(z, ctx))
        return self.head(z, ctx)

    def __call__(self, x, **kw):
        return self.forward(x, **kw)

    def forward(self, x, recorder=None, keep_levels=False, attention=False):
        """Run all timesteps of ``x: (T, B, C_in, D, H, W)``."""
        x = as_tensor(x)
        cfg = self.cfg
        if x.ndim != 6 or x.shape[2] != cfg.in_channels or x.shape[3:] != cfg.input_dims:
            raise ShapeMismatch(
                f"expected (T, B, {cfg.in_channels}, *{cfg.input_dims}), got {x.shape}")
        steps, bsz = x.shape[:2]
        ctx = Ctx(T=steps, training=self.training, recorder=recorder,
                  attention={} if attention else None)
        h = reshape(x, (steps * bsz,) + x.shape[2:])
        h = F.gelu(self.stem_bn(self.stem(h, ctx), ctx))
        levels = []
        for block in self.blocks:
            h = block(h, ctx)
            levels.append(h)
        fused = self.msf(levels, ctx)                        # (T*B, m, d4, h4, w4)
        per_step = reshape(self.classify(fused, ctx), (steps, bsz, cfg.n_classes))
        final = temporal_average(reshape(fused, (steps, bsz) + fused.shape[1:]))
        fused_logits = self.classify(final, ctx)
        stats = {k: (v[0], v[1]) for k, v in ctx.spikes.items()}
        return ForwardOutput(per_step, fused_logits, stats,
                             levels if keep_levels else None, ctx.attention)


def build_model(cfg=None, dtype=np.float32):
    """Construct and initialise a model; initial weights are a function of ``cfg.seed``."""
    cfg = cfg or ModelConfig()
    if not isinstance(cfg, ModelConfig):
        raise InvalidConfig(f"expected ModelConfig, got {type(cfg).__name__}")
    return FasterSNN(cfg, dtype=dtype)


def forward(model, x, **kw):
    return model.forward(x, **kw)


def count_params(model):
    """Trainable element count (weights, biases, BN affine, attention and fusion scalars)."""
    return int(sum(p.size for p in model.parameters()))


def level_shapes(cfg, batch=1):
    """Closed-form per-block output shapes ``(B, C, d, h, w)``."""
    dims = np.array(cfg.input_dims)
    out = []
    for c in cfg.stage_channels:
        dims = dims // 2
        out.append((batch, c) + tuple(int(n) for n in dims))
    return out
