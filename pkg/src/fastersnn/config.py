"""Run configuration: flat ``section.key = value`` text with model/train/data sections.

Example::

    # comments and blank lines are ignored
    model.input_dims = 32,32,32
    model.stage_channels = 8,16,32,64
    model.lif.T = 2
    train.max_epochs = 20
    data.manifest = data/manifest.tsv

Values are coerced to the type of the field's default. Unknown keys raise
:class:`InvalidConfig` naming the key.
"""
from dataclasses import asdict, dataclass, field, fields, replace

from .errors import InvalidConfig
from .lif import LifConfig
from .model import ModelConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    manifest: str = ""
    noise_sigma: float = 0.1
    # splits used when the manifest has no split column
    holdout: str = "holdout(8:2)"
    # train/validation ratio carved out of the training split
    val_holdout: str = "holdout(4:1)"
    seed: int = 0

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def to_dict(self):
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": self.data.to_dict()}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {"model", "train", "data"}
        if unknown:
            raise InvalidConfig(f"unknown config sections: {sorted(unknown)}")
        m = dict(d.get("model", {}))
        if isinstance(m.get("lif"), dict):
            m["lif"] = LifConfig(**m["lif"])
        try:
            return cls(ModelConfig.from_dict(m), TrainConfig.from_dict(d.get("train", {})),
                       DataConfig(**d.get("data", {})))
        except TypeError as e:
            raise InvalidConfig(str(e)) from None

    def to_text(self):
        lines = []
        for section, obj in (("model", self.model), ("train", self.train), ("data", self.data)):
            for f in fields(obj):
                val = getattr(obj, f.name)
                if isinstance(val, LifConfig):
                    for g in fields(val):
                        lines.append(f"{section}.lif.{g.name} = {_fmt(getattr(val, g.name))}")
                else:
                    lines.append(f"{section}.{f.name} = {_fmt(val)}")
        return "\n".join(lines) + "\n"


def _fmt(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return str(v)


def _coerce(key, raw, default):
    raw = raw.strip()
    try:
        if raw.lower() == "none":
            return None
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("true", "1", "yes")
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            inner = default[0] if default else 0
            return tuple(_coerce(key, s, inner) for s in items)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float) or default is None:
            return float(raw)
        return raw
    except ValueError:
        raise InvalidConfig(f"bad value for {key}: {raw!r}") from None


_SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def parse_config_text(text, base=None):
    """Apply ``key = value`` lines on top of ``base`` (defaults when None)."""
    base = base or RunConfig()
    updates = {"model": {}, "train": {}, "data": {}, "lif": {}}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidConfig(f"line {n}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        parts = key.split(".")
        if parts[:2] == ["model", "lif"] and len(parts) == 3:
            section, name, cls, current = "lif", parts[2], LifConfig, base.model.lif
        elif len(parts) == 2 and parts[0] in _SECTIONS:
            section, name = parts
            cls, current = _SECTIONS[section], getattr(base, section)
        else:
            raise InvalidConfig(f"unknown config key {key!r}")
        known = {f.name: f for f in fields(cls)}
        if name not in known or (section == "model" and name == "lif"):
            raise InvalidConfig(f"unknown config key {key!r}")
        updates[section][name] = _coerce(key, raw, getattr(current, name))
    try:
        lif = replace(base.model.lif, **updates["lif"])
        model = replace(base.model, lif=lif, **updates["model"])
        return RunConfig(model, replace(base.train, **updates["train"]),
                         replace(base.data, **updates["data"]))
    except TypeError as e:
        raise InvalidConfig(str(e)) from None


def load_config(path):
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())
