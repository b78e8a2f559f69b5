"""Run configuration: flat ``key = value`` files, flag overrides, validation."""
import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path

from .compositor import ClampRanges


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass
class RunConfig:
    data_dir: str = "data/mnist"
    out: str = "runs/terse"
    baseline: str = ""          # checkpoint of the MNIST-only target; trained in-process if empty
    seed: int = 0
    cycles: int = 10
    per_class_capacity: int = 500
    increment_total: int = 0    # > 0 overrides per-class capacity with increment_total / 10
    fig7_profile: bool = False  # 500 samples per cycle

    synth_lr: float = 1e-3
    synth_batch: int = 1024
    synth_weight_decay: float = 5e-4
    synth_gain: float = 0.4
    synth_dropout: float = 0.5
    synth_epoch_cap: float = 50.0

    target_lr: float = 1e-2
    target_batch: int = 64
    target_momentum: float = 0.5
    target_weight_decay: float = 5e-4
    target_epochs: float = 30.0
    synthetic_fraction: float = 0.0  # 0 pools real and cached data; 0.5 is a 1:1 batch ratio
    baseline_epochs: float = 30.0
    baseline_seed: int = 0

    discriminator: bool = False
    lambda_d: float = 1.0
    disc_lr: float = 1e-3
    saturating_loss: bool = False

    background: str = "black"   # black | gray
    inject_artifacts: bool = False

    rotation_deg: float = 20.0
    translate: float = 0.3
    shear: float = 0.2
    scale_min: float = 0.8
    scale_max: float = 1.2

    testset_seed: int = 1234
    affine_per_digit: int = 2
    dump_samples: bool = True

    @property
    def capacity(self):
        total = 500 if self.fig7_profile and not self.increment_total else self.increment_total
        return total // 10 if total > 0 else self.per_class_capacity

    @property
    def lambda_effective(self):
        return self.lambda_d if self.discriminator else 0.0

    def ranges(self):
        rot = math.radians(self.rotation_deg)
        return ClampRanges(rotation=(-rot, rot), tx=(-self.translate, self.translate),
                           ty=(-self.translate, self.translate), shear=(-self.shear, self.shear),
                           sx=(self.scale_min, self.scale_max), sy=(self.scale_min, self.scale_max))

    def validate(self):
        positive = ["synth_lr", "synth_batch", "synth_gain", "synth_epoch_cap", "target_lr",
                    "target_batch", "disc_lr", "affine_per_digit"]
        for key in positive:
            if getattr(self, key) <= 0:
                raise ConfigError(key, f"must be positive, got {getattr(self, key)}")
        for key in ["cycles", "per_class_capacity", "increment_total", "target_epochs",
                    "baseline_epochs", "synth_weight_decay", "target_weight_decay", "lambda_d"]:
            if getattr(self, key) < 0:
                raise ConfigError(key, f"must be non-negative, got {getattr(self, key)}")
        if self.increment_total and self.increment_total % 10:
            raise ConfigError("increment_total", "must be a multiple of 10 (one share per class)")
        if self.capacity <= 0:
            raise ConfigError("per_class_capacity", "resolves to zero samples per class")
        if not 0 <= self.target_momentum < 1:
            raise ConfigError("target_momentum", "must lie in [0, 1)")
        if not 0 <= self.synth_dropout < 1:
            raise ConfigError("synth_dropout", "must lie in [0, 1)")
        if not 0 <= self.synthetic_fraction < 1:
            raise ConfigError("synthetic_fraction", "must lie in [0, 1)")
        if self.background not in ("black", "gray"):
            raise ConfigError("background", f"expected black or gray, got {self.background!r}")
        try:
            self.ranges()
        except ValueError as exc:
            raise ConfigError("rotation_deg/translate/shear/scale", str(exc)) from exc
        return self

    def dumps(self):
        """Every field, defaults included, in the file format ``load`` reads."""
        lines = ["# resolved run configuration"]
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {_format(v)}")
        return "\n".join(lines) + "\n"


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key, typ, raw):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {typ.__name__}") from None


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_text(text, source="<config>"):
    """``key = value`` lines with ``#`` comments -> dict of typed values."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(key, "unknown configuration key")
        out[key] = _coerce(key, _TYPES[key], value)
    return out


def load(path=None, overrides=None):
    """Defaults, then the file at ``path``, then ``overrides``; validated."""
    values = {}
    if path:
        values.update(parse_text(Path(path).read_text(encoding="utf-8"), str(path)))
    for key, value in (overrides or {}).items():
        if key not in _TYPES:
            raise ConfigError(key, "unknown configuration key")
        values[key] = _coerce(key, _TYPES[key], value) if isinstance(value, str) else value
    return dataclasses.replace(RunConfig(), **values).validate()
