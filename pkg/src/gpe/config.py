"""Line-oriented experiment configuration.

Grammar
-------
- ``[section]`` headers group keys; blank lines and ``#`` comments ignored.
- ``key = value`` lines assign one field; keys may appear before any header
  (or under the wrong one) as long as the key name is unique across sections.
- Unknown keys, duplicate keys, type mismatches, and out-of-range values are
  rejected with the offending line number.

An empty file resolves to the shipped rotated-digits recipe (dynamic
prototype growth, 20 tasks); every field below can be overridden.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

from .errors import ConfigurationError

KINDS = ("rotation", "highlight")
SPACINGS = ("uniform", "even")
MODES = ("fixed", "dynamic")
SCHEMES = ("none", "er", "der")
VARIANTS = ("gpe", "lb", "ub")


@dataclass
class StreamConfig:
    kind: str = "rotation"
    t_count: int = 20
    seed: int = 1
    data_dir: str = "data"
    spacing: str = "uniform"
    # highlight-stream shape (ignored by rotation streams)
    train_per_task: int = 24
    test_sequences: int = 48
    seq_len_min: int = 90
    seq_len_max: int = 150
    frame_dim: int = 32
    signature_scale: float = 6.0
    signature_decay: float = 1.0
    noise_scale: float = 1.0
    combo_decay: float = 0.35


@dataclass
class ModelConfig:
    hidden: int = 100
    feature_dim: int = 128
    mode: str = "dynamic"
    prototypes_per_class: int = 5
    growth_per_class: int = 5


@dataclass
class OptimConfig:
    lr: float = 0.1
    epochs: int = 1
    batch_size: int = 128
    lr_halve_every: int = 0  # epochs; 0 disables halving


@dataclass
class ConstraintConfig:
    gamma: float = 0.01
    lambda0: float = 10.0
    dual_step: float = -1.0  # -1 means "follow the learning rate"


@dataclass
class ReplayConfig:
    capacity: int = 0
    scheme: str = "none"
    alpha: float = 0.5


@dataclass
class RunConfig:
    variant: str = "gpe"
    out: str = ""


@dataclass
class ExperimentConfig:
    stream: StreamConfig = field(default_factory=StreamConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    constraint: ConstraintConfig = field(default_factory=ConstraintConfig)
    replay: ReplayConfig = field(default_factory=ReplayConfig)
    run: RunConfig = field(default_factory=RunConfig)


_SECTIONS = {
    "stream": StreamConfig,
    "model": ModelConfig,
    "optim": OptimConfig,
    "constraint": ConstraintConfig,
    "replay": ReplayConfig,
    "run": RunConfig,
}

# key -> (section, type); built once, also proves key names are globally unique
_KEY_INDEX: dict[str, tuple[str, type]] = {}
for _section, _cls in _SECTIONS.items():
    for _f in fields(_cls):
        if _f.name in _KEY_INDEX:
            raise AssertionError(f"duplicate config key {_f.name}")
        _KEY_INDEX[_f.name] = (_section, type(_f.default))

_CHOICES = {
    "kind": KINDS,
    "spacing": SPACINGS,
    "mode": MODES,
    "scheme": SCHEMES,
    "variant": VARIANTS,
}

_POSITIVE = {
    "t_count", "train_per_task", "test_sequences", "seq_len_min", "seq_len_max",
    "frame_dim", "signature_scale", "signature_decay", "hidden", "feature_dim",
    "prototypes_per_class", "growth_per_class", "lr", "epochs", "batch_size",
    "gamma",
}
_NON_NEGATIVE = {"seed", "noise_scale", "combo_decay", "lr_halve_every",
                 "lambda0", "capacity", "alpha"}


def _err(line_no: int, message: str) -> ConfigurationError:
    return ConfigurationError(f"line {line_no}: {message}")


def _convert(key: str, raw: str, line_no: int):
    kind = _KEY_INDEX[key][1]
    if kind is str:
        value = raw
        if key in _CHOICES and value not in _CHOICES[key]:
            raise _err(line_no, f"{key} must be one of {_CHOICES[key]}, got {value!r}")
        return value
    try:
        if kind is int:
            return int(raw)
        return float(raw)
    except ValueError:
        raise _err(line_no, f"{key} expects {kind.__name__}, got {raw!r}") from None


def _validate_value(key: str, value, line_no: int | None) -> None:
    def bad(message: str) -> ConfigurationError:
        return _err(line_no, message) if line_no else ConfigurationError(message)

    if key == "dual_step":
        if not (value > 0.0 or value == -1.0):
            raise bad("dual_step must be positive (or -1 to follow lr)")
        return
    if key in _POSITIVE and not value > 0:
        raise bad(f"{key} must be positive, got {value}")
    if key in _NON_NEGATIVE and value < 0:
        raise bad(f"{key} must be non-negative, got {value}")


def parse_config(text: str) -> ExperimentConfig:
    """Parse ``key = value`` text into a fully validated ExperimentConfig."""
    overrides: dict[str, dict[str, object]] = {s: {} for s in _SECTIONS}
    lines_seen: dict[str, int] = {}
    section: str | None = None

    for line_no, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise _err(line_no, f"malformed section header {line!r}")
            name = line[1:-1].strip()
            if name not in _SECTIONS:
                raise _err(line_no, f"unknown section [{name}]")
            section = name
            continue
        if "=" not in line:
            raise _err(line_no, f"expected 'key = value', got {line!r}")
        key, _, raw_value = line.partition("=")
        key, raw_value = key.strip(), raw_value.strip()
        if key not in _KEY_INDEX:
            raise _err(line_no, f"unknown key {key!r}")
        home = _KEY_INDEX[key][0]
        if section is not None and section != home:
            raise _err(line_no, f"key {key!r} belongs to section [{home}]")
        if key in lines_seen:
            raise _err(line_no, f"duplicate key {key!r} (first set on line {lines_seen[key]})")
        lines_seen[key] = line_no
        value = _convert(key, raw_value, line_no)
        _validate_value(key, value, line_no)
        overrides[home][key] = value

    cfg = ExperimentConfig(
        **{name: cls(**overrides[name]) for name, cls in _SECTIONS.items()}
    )
    _validate_cross(cfg)
    return cfg


def _validate_cross(cfg: ExperimentConfig) -> None:
    if cfg.stream.seq_len_min > cfg.stream.seq_len_max:
        raise ConfigurationError("seq_len_min exceeds seq_len_max")
    if cfg.constraint.dual_step == -1.0:
        cfg.constraint.dual_step = cfg.optim.lr
    if cfg.model.mode == "dynamic" and cfg.model.growth_per_class < 1:
        raise ConfigurationError("dynamic mode needs growth_per_class >= 1")


def load_config(path) -> ExperimentConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def resolved_text(cfg: ExperimentConfig) -> str:
    """Canonical serialization: every field, grouped by section."""
    out = []
    for name, _cls in _SECTIONS.items():
        out.append(f"[{name}]")
        block = getattr(cfg, name)
        for f in fields(block):
            out.append(f"{f.name} = {getattr(block, f.name)}")
        out.append("")
    return "\n".join(out)


def config_hash(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(resolved_text(cfg).encode()).hexdigest()[:16]


def set_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    """Copy of cfg with one numeric field (unique key name) replaced."""
    aliases = {"k": "prototypes_per_class"}
    key = aliases.get(axis, axis)
    if key not in _KEY_INDEX:
        raise ConfigurationError(f"unknown sweep axis {axis!r}")
    section, kind = _KEY_INDEX[key]
    if kind is str:
        raise ConfigurationError(f"sweep axis {axis!r} is not numeric")
    cast = kind(value)
    _validate_value(key, cast, None)
    block = replace(getattr(cfg, section), **{key: cast})
    new = replace(cfg, **{section: block})
    _validate_cross(new)
    return new
