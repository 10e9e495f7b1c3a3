"""Flat, line-oriented experiment configuration.

Files hold `section.key = value` lines (`#` comments). Precedence is
command-line overrides > config file > built-in defaults. Every run writes
a canonical resolved snapshot whose hash is the config fingerprint.
"""

from __future__ import annotations

import difflib
import hashlib
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError


def _parse_bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_float_list(s: str):
    s = s.strip()
    if not s:
        return ()
    return tuple(float(tok) for tok in s.split(","))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class DataCfg:
    num_ids: int = 64
    images_per_id: int = 100
    image_size: int = 64
    root: str = ""
    train_fraction: float = 0.8


@dataclass(frozen=True)
class ModelCfg:
    width_base: int = 16
    embedding_dim: int = 128


@dataclass(frozen=True)
class LcdCfg:
    stage: int = 3
    gamma_min: int = -1  # -1: floor(0.1 * c)
    gamma_max: int = -1  # -1: floor(0.6 * c)
    order: str = "bn_then_lcd"
    seed: int = -1  # -1: use seed.dropout for the mask stream


@dataclass(frozen=True)
class SamCfg:
    enabled: bool = True
    squash: str = "logistic"
    c_mid: int = -1  # -1: c // 4
    hidden: int = -1  # -1: c


@dataclass(frozen=True)
class StrategyCfg:
    name: str = "lcd"


@dataclass(frozen=True)
class CutoutCfg:
    box_size: int = 16


@dataclass(frozen=True)
class DropblockCfg:
    block_size: int = 3
    drop_prob: float = 0.1


@dataclass(frozen=True)
class WcdCfg:
    keep_ratio: float = 0.7


@dataclass(frozen=True)
class TemplateCfg:
    size_min: float = 0.2
    size_max: float = 0.5
    fill: float = 0.5


@dataclass(frozen=True)
class HeadCfg:
    margin: float = 0.5
    scale: float = 64.0


@dataclass(frozen=True)
class TrainCfg:
    alpha: float = 100.0
    beta: float = 1.0
    lr: float = 0.1
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 64
    decay_points: tuple = (0.6, 0.85)
    decay_factor: float = 0.1
    clip_norm: float = 0.0  # overall gradient norm; 0 disables
    reg_clip_norm: float = 1.0  # budget for the filter-regularizer gradient; 0 disables
    precision: int = 64


@dataclass(frozen=True)
class SeedCfg:
    data: int = 1
    init: int = 2
    dropout: int = 3


@dataclass(frozen=True)
class EvalCfg:
    far_targets: tuple = (1e-2, 1e-3)
    occl_min: float = 0.3
    occl_max: float = 0.5
    fill: float = 0.5
    occl_draws: int = 1  # occluder placements per probe; >1 averages placement noise
    genuine_pairs: int = 800
    impostor_pairs: int = 2000


@dataclass(frozen=True)
class RegCfg:
    epsilon: float = 1e-8
    column_mode: str = "kernel_cols"
    tap: str = "after_norm"
    init: str = "uniform"  # init of the regularized conv's columns


@dataclass(frozen=True)
class BnCfg:
    epsilon: float = 1e-5
    momentum: float = 0.9


_SECTIONS = {
    "data": DataCfg,
    "model": ModelCfg,
    "lcd": LcdCfg,
    "sam": SamCfg,
    "strategy": StrategyCfg,
    "cutout": CutoutCfg,
    "dropblock": DropblockCfg,
    "wcd": WcdCfg,
    "template": TemplateCfg,
    "head": HeadCfg,
    "train": TrainCfg,
    "seed": SeedCfg,
    "eval": EvalCfg,
    "reg": RegCfg,
    "bn": BnCfg,
}

_CHOICES = {
    "lcd.order": ("bn_then_lcd", "lcd_then_maskedbn"),
    "sam.squash": ("logistic", "identity"),
    "strategy.name": ("none", "cutout", "dropblock", "wcd", "lcd", "image_template"),
    "reg.column_mode": ("kernel_cols", "kernel_rows"),
    "reg.tap": ("after_norm", "after_conv"),
    "reg.init": ("orthogonal", "uniform"),
}


@dataclass(frozen=True)
class ExperimentConfig:
    data: DataCfg = field(default_factory=DataCfg)
    model: ModelCfg = field(default_factory=ModelCfg)
    lcd: LcdCfg = field(default_factory=LcdCfg)
    sam: SamCfg = field(default_factory=SamCfg)
    strategy: StrategyCfg = field(default_factory=StrategyCfg)
    cutout: CutoutCfg = field(default_factory=CutoutCfg)
    dropblock: DropblockCfg = field(default_factory=DropblockCfg)
    wcd: WcdCfg = field(default_factory=WcdCfg)
    template: TemplateCfg = field(default_factory=TemplateCfg)
    head: HeadCfg = field(default_factory=HeadCfg)
    train: TrainCfg = field(default_factory=TrainCfg)
    seed: SeedCfg = field(default_factory=SeedCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)
    reg: RegCfg = field(default_factory=RegCfg)
    bn: BnCfg = field(default_factory=BnCfg)

    def flat_items(self):
        for section, cfg in sorted(self.sections().items()):
            for f in fields(cfg):
                yield f"{section}.{f.name}", getattr(cfg, f.name)

    def sections(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def snapshot_text(self) -> str:
        lines = [f"{key} = {_fmt(value)}" for key, value in self.flat_items()]
        return "\n".join(lines) + "\n"

    def fingerprint(self) -> str:
        return hashlib.sha256(self.snapshot_text().encode("ascii")).hexdigest()[:16]

    def seed_fingerprint(self) -> str:
        text = f"{self.seed.data},{self.seed.init},{self.seed.dropout}"
        return hashlib.sha256(text.encode("ascii")).hexdigest()[:12]

    def with_values(self, **dotted) -> "ExperimentConfig":
        """Copy with dotted-key replacements, e.g. with_values(**{"train.alpha": 0.0})."""
        cfg = self
        for key, value in dotted.items():
            section, name = _split_key(key)
            current = getattr(cfg, section)
            cfg = replace(cfg, **{section: replace(current, **{name: value})})
        return cfg


def known_keys():
    keys = []
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            keys.append(f"{section}.{f.name}")
    return keys


def _split_key(key: str):
    if "." not in key:
        raise ConfigError(f"config key {key!r} must look like section.key")
    section, name = key.split(".", 1)
    if section not in _SECTIONS or name not in {f.name for f in fields(_SECTIONS[section])}:
        near = difflib.get_close_matches(key, known_keys(), n=3)
        hint = f"; nearest valid keys: {', '.join(near)}" if near else ""
        raise ConfigError(f"unknown config key {key!r}{hint}")
    return section, name


def _convert(key: str, raw: str):
    section, name = _split_key(key)
    ftype = {f.name: f.type for f in fields(_SECTIONS[section])}[name]
    try:
        if ftype in ("int", int):
            value = int(raw)
        elif ftype in ("float", float):
            value = float(raw)
        elif ftype in ("bool", bool):
            value = _parse_bool(raw)
        elif ftype in ("tuple", tuple):
            value = _parse_float_list(raw)
        else:
            value = raw.strip()
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from exc
    if key in _CHOICES and value not in _CHOICES[key]:
        raise ConfigError(
            f"bad value {value!r} for {key}; expected one of {', '.join(_CHOICES[key])}"
        )
    return value


def parse_config_text(text: str) -> dict:
    """Raw key -> string-value mapping from flat `key = value` lines."""
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected `section.key = value`, got {line!r}")
        key, value = stripped.split("=", 1)
        raw[key.strip()] = value.strip()
    return raw


def parse_config_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_config_text(path.read_text(encoding="utf-8"))


def apply_overrides(raw: dict, overrides) -> dict:
    out = dict(raw)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def resolve(raw: dict) -> ExperimentConfig:
    """Typed config from raw strings; unknown keys fail with suggestions."""
    by_section: dict = {section: {} for section in _SECTIONS}
    for key, value in raw.items():
        section, name = _split_key(key)
        by_section[section][name] = _convert(key, value)
    kwargs = {section: cls(**by_section[section]) for section, cls in _SECTIONS.items()}
    return ExperimentConfig(**kwargs)


def load(config_path=None, overrides=None) -> ExperimentConfig:
    raw = parse_config_file(config_path) if config_path else {}
    raw = apply_overrides(raw, overrides)
    return resolve(raw)
