"""Network and training configuration plus the flat ``key=value`` file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Tuple


class ConfigError(ValueError):
    pass


@dataclass
class NetworkConfig:
    unary_channels: int = 32
    gwc_groups: int = 8
    concat_channels: int = 4
    d_max: int = 32
    base_3d_channels: int = 8
    stage_blocks: Tuple[int, int, int, int] = (1, 2, 1, 1)
    use_concat_volume: bool = True
    use_gwc_volume: bool = True
    num_hourglasses: int = 3

    def __post_init__(self):
        self.stage_blocks = tuple(int(b) for b in self.stage_blocks)
        self.validate()

    def validate(self) -> None:
        if self.unary_channels < 1 or self.base_3d_channels < 1:
            raise ConfigError("unary_channels and base_3d_channels must be positive")
        if self.use_gwc_volume and (self.gwc_groups < 1 or self.unary_channels % self.gwc_groups):
            raise ConfigError(
                f"unary_channels ({self.unary_channels}) must be divisible by gwc_groups ({self.gwc_groups})")
        if self.d_max < 4 or self.d_max % 4:
            raise ConfigError(f"d_max ({self.d_max}) must be a positive multiple of 4")
        if not (self.use_concat_volume or self.use_gwc_volume):
            raise ConfigError("at least one of use_concat_volume / use_gwc_volume must be set")
        if self.use_concat_volume and self.concat_channels < 1:
            raise ConfigError("concat_channels must be positive when the concatenation volume is used")
        if len(self.stage_blocks) != 4 or min(self.stage_blocks) < 1:
            raise ConfigError("stage_blocks needs four positive block counts")

    @property
    def d_levels(self) -> int:
        return self.d_max // 4

    @property
    def volume_channels(self) -> int:
        c = 0
        if self.use_gwc_volume:
            c += self.gwc_groups
        if self.use_concat_volume:
            c += 2 * self.concat_channels
        return c

    @classmethod
    def full_scale(cls, **overrides) -> "NetworkConfig":
        base = dict(unary_channels=320, gwc_groups=40, concat_channels=12, d_max=192,
                    base_3d_channels=32, stage_blocks=(3, 16, 3, 3))
        base.update(overrides)
        return cls(**base)

    @classmethod
    def desk(cls, **overrides) -> "NetworkConfig":
        return cls(**overrides)


def stage_widths(unary_channels: int) -> Tuple[int, int, int, int]:
    """Channel widths of the stem/conv1, conv2, conv3 and conv4 stages.

    The three concatenated stages split the unary channels 1:2:2, giving
    64/128/128 for 320 channels; the stem runs at half the conv2 width.
    """
    c2 = max(1, round(unary_channels / 5))
    c3 = (unary_channels - c2 + 1) // 2
    c4 = unary_channels - c2 - c3
    if c4 < 1:
        raise ConfigError(f"unary_channels ({unary_channels}) too small to split across three stages")
    c1 = max(4, round(unary_channels / 10))
    return c1, c2, c3, c4


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 2
    max_iterations: int = 3000
    lr_milestones: Tuple[int, ...] = ()
    lr_decay: float = 2.0
    loss_weights: Tuple[float, float, float, float] = (0.5, 0.5, 0.7, 1.0)
    seed: int = 0
    precision: str = "float32"
    log_interval: int = 50
    val_interval: int = 250
    target_val_epe: float = 0.0

    def __post_init__(self):
        self.lr_milestones = tuple(int(m) for m in self.lr_milestones)
        self.loss_weights = tuple(float(x) for x in self.loss_weights)
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if list(self.lr_milestones) != sorted(self.lr_milestones):
            raise ConfigError("lr_milestones must be sorted ascending")
        if min(self.loss_weights) < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.batch_size < 1 or self.max_iterations < 0:
            raise ConfigError("batch_size must be positive and max_iterations nonnegative")


@dataclass
class SweepConfig:
    base_channels: Tuple[int, ...] = (8, 4, 2)
    variants: Tuple[str, ...] = ("cat", "gwc-cat")
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)


REQUIRED_KEYS = ("d_max", "unary_channels", "gwc_groups", "concat_channels", "base_3d_channels",
                 "lr", "batch_size", "max_iterations", "seed")

_NET_FIELDS = {f.name: f for f in dataclasses.fields(NetworkConfig)}
_TRAIN_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}
_SWEEP_KEYS = ("sweep_base_channels", "sweep_variants", "variant")


def _convert(raw: str, default):
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        parts = [p for p in raw.replace(",", " ").split() if p]
        return tuple(parts)
    return raw


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Tuple[int, str]]:
    """Map each key to ``(line number, raw value)``; '#' starts a comment."""
    values: Dict[str, Tuple[int, str]] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _NET_FIELDS and key not in _TRAIN_FIELDS and key not in _SWEEP_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = (lineno, raw)
    return values


def load_config(path) -> Tuple[NetworkConfig, TrainConfig, Dict[str, str]]:
    """Read a ``key=value`` file; returns network, training and sweep/extra settings."""
    path = Path(path)
    values = parse_config_text(path.read_text(), str(path))
    for key in REQUIRED_KEYS:
        if key not in values:
            raise ConfigError(f"{path}: missing required key {key!r}")
    net_kw, train_kw, extra = {}, {}, {}
    defaults_net, defaults_train = NetworkConfig(), TrainConfig()
    for key, (lineno, raw) in values.items():
        try:
            if key in _NET_FIELDS:
                v = _convert(raw, getattr(defaults_net, key))
                net_kw[key] = tuple(int(x) for x in v) if key == "stage_blocks" else v
            elif key in _TRAIN_FIELDS:
                v = _convert(raw, getattr(defaults_train, key))
                if key == "lr_milestones":
                    v = tuple(int(x) for x in v)
                elif key == "loss_weights":
                    v = tuple(float(x) for x in v)
                train_kw[key] = v
            else:
                extra[key] = raw
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: bad value for {key!r}: {exc}") from None
    if "variant" in extra:
        net_kw.update(variant_flags(extra["variant"]))
    try:
        return NetworkConfig(**net_kw), TrainConfig(**train_kw), extra
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from None


def variant_flags(variant: str) -> Dict[str, bool]:
    table = {
        "gwc-cat": dict(use_gwc_volume=True, use_concat_volume=True),
        "gwc": dict(use_gwc_volume=True, use_concat_volume=False),
        "cat": dict(use_gwc_volume=False, use_concat_volume=True),
    }
    if variant not in table:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {sorted(table)}")
    return table[variant]


def format_config(net: NetworkConfig, train: TrainConfig) -> str:
    lines = ["# network"]
    for f in dataclasses.fields(NetworkConfig):
        v = getattr(net, f.name)
        lines.append(f"{f.name} = {_fmt(v)}")
    lines.append("# training")
    for f in dataclasses.fields(TrainConfig):
        v = getattr(train, f.name)
        lines.append(f"{f.name} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)
