"""Declarative experiment configuration (TOML) with validation and digests."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields, replace

import tomli

from .attacks import ATTACK_KINDS, AttackKind
from .errors import ConfigError
from .lora import ResetSchedule
from .model import ModelConfig


@dataclass(frozen=True)
class ExperimentSection:
    name: str = "reference"
    seed: int = 1


@dataclass(frozen=True)
class ModelSection:
    backbone: str = "transformer"
    patch: int = 4
    dim: int = 32
    heads: int = 4
    blocks: int = 1
    mlp_ratio: int = 4
    activation: str = "gelu"
    hidden: tuple = (32, 32)


@dataclass(frozen=True)
class PretrainSection:
    epochs: int = 30
    lr: float = 0.05
    batch_size: int = 16
    train_per_class: int = 400
    val_per_class: int = 100
    n_classes: int = 10
    pattern_seed: int = 1001
    seed: int = 0
    floor: float = 0.9
    noise: float = 0.1
    mix: float = 0.0
    occlusion: float = 0.5
    occlusion_size: int = 6
    head_init: str = "probe"
    probe_epochs: int = 10
    probe_lr: float = 0.05


@dataclass(frozen=True)
class LoraSection:
    rank: object = 2
    init: str = "pissa"
    targets: tuple = ("q", "v")
    train_extra: tuple = ()


@dataclass(frozen=True)
class DataSection:
    n_classes: int = 5
    image_shape: tuple = (16, 16, 3)
    train_per_class: int = 400
    test_per_class: int = 100
    n_components: int = 3
    max_freq: int = 2
    amplitude: float = 0.25
    noise: float = 0.1
    mix: float = 0.0
    pattern_seed: int = 7
    seed: int = 0
    occlusion: float = 0.0
    occlusion_size: int = 6
    label_noise: float = 0.0
    alpha: float = 0.9
    size_bounds: tuple = (0.025, 0.075)


@dataclass(frozen=True)
class AttackSection:
    kind: str = "baseline"
    n_attackers: int = 2
    poison_ratio: float = 0.25
    target: int = 2
    trigger_row: int = 0
    trigger_col: int = 0
    trigger_size: int = 5
    trigger_color: tuple = (1.0, 0.0, 0.0)
    window: tuple = (0, 30)
    p_mask: float = 0.05
    alpha: float = 0.5
    trigger_steps: int = 20
    trigger_lr: float = 0.1
    adv_steps: int = 10
    adv_lr: float = 0.01


@dataclass(frozen=True)
class FederationSection:
    n_clients: int = 20
    per_round: int = 5
    rounds: int = 300
    local_epochs: int = 2
    lr: float = 0.01
    batch_size: int = 16
    server_lr: float = 1.0
    clip: float = 1.0


@dataclass(frozen=True)
class ResetSection:
    enabled: bool = False
    period: int = 5
    fraction: float = 0.01
    cooldown: int = 500


@dataclass(frozen=True)
class EvalSection:
    dense_until: int = 60
    period: int = 5
    sigma_period: int = 10
    sigma_lag: int = 50
    sigma_space: str = "model"
    checkpoint_rounds: tuple = ()


SECTIONS = {
    "experiment": ExperimentSection,
    "model": ModelSection,
    "pretrain": PretrainSection,
    "lora": LoraSection,
    "data": DataSection,
    "attack": AttackSection,
    "federation": FederationSection,
    "reset": ResetSection,
    "eval": EvalSection,
}


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    model: ModelSection = field(default_factory=ModelSection)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    lora: LoraSection = field(default_factory=LoraSection)
    data: DataSection = field(default_factory=DataSection)
    attack: AttackSection = field(default_factory=AttackSection)
    federation: FederationSection = field(default_factory=FederationSection)
    reset: ResetSection = field(default_factory=ResetSection)
    eval: EvalSection = field(default_factory=EvalSection)

    # ---- derived views -------------------------------------------------

    @property
    def full_finetune(self) -> bool:
        return self.lora.rank == "full"

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(
            backbone=m.backbone, image_shape=self.data.image_shape, patch=m.patch, dim=m.dim, heads=m.heads,
            blocks=m.blocks, mlp_ratio=m.mlp_ratio, n_classes=self.data.n_classes, activation=m.activation,
            hidden=m.hidden,
        )

    def pretrain_model_config(self) -> ModelConfig:
        return replace(self.model_config(), n_classes=self.pretrain.n_classes)

    def attack_kind(self) -> AttackKind:
        a = self.attack
        return AttackKind(a.kind, a.p_mask, a.alpha, a.trigger_steps, a.trigger_lr, a.adv_steps, a.adv_lr)

    def reset_schedule(self) -> ResetSchedule:
        r = self.reset
        return ResetSchedule(r.period, r.fraction, r.cooldown, r.enabled)

    # ---- (de)serialization --------------------------------------------

    def to_dict(self) -> dict:
        return {name: _plain(dataclasses.asdict(getattr(self, name))) for name in SECTIONS}

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def with_overrides(self, overrides) -> "ExperimentConfig":
        data = self.to_dict()
        for item in overrides:
            key, value = parse_override(item)
            set_key(data, key, value)
        return from_dict(data)

    def validate(self) -> "ExperimentConfig":
        _validate(self)
        return self


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _coerce(section, fld, value):
    key = f"{section}.{fld.name}"
    default = fld.default
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} must be a list, got {value!r}", key)
        return tuple(value)
    if fld.name == "rank" and section == "lora":
        if value == "full" or (isinstance(value, int) and not isinstance(value, bool)):
            return value
        raise ConfigError(f"{key} must be a positive integer or \"full\", got {value!r}", key)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false, got {value!r}", key)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer, got {value!r}", key)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}", key)
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{key} must be a string, got {value!r}", key)
    return value


def from_dict(data: dict) -> ExperimentConfig:
    sections = {}
    for name, body in data.items():
        if name not in SECTIONS:
            raise ConfigError(f"unknown config section [{name}]", name)
        if not isinstance(body, dict):
            raise ConfigError(f"[{name}] must be a table", name)
        cls = SECTIONS[name]
        known = {f.name: f for f in fields(cls)}
        kwargs = {}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"unknown config key {name}.{key}", f"{name}.{key}")
            kwargs[key] = _coerce(name, known[key], value)
        sections[name] = cls(**kwargs)
    return ExperimentConfig(**sections).validate()


def load_config(path, overrides=()) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            data = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", "config") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}", "config") from None
    cfg = from_dict(data)
    return cfg.with_overrides(overrides) if overrides else cfg


def parse_override(item: str):
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form section.key=value", item)
    key, raw = item.split("=", 1)
    key = key.strip()
    try:
        value = tomli.loads(f"v = {raw.strip()}")["v"]
    except tomli.TOMLDecodeError:
        value = raw.strip()
    return key, value


def set_key(data: dict, key: str, value) -> None:
    parts = key.split(".")
    if len(parts) != 2 or parts[0] not in SECTIONS:
        raise ConfigError(f"unknown config key {key}", key)
    section, name = parts
    if name not in {f.name for f in fields(SECTIONS[section])}:
        raise ConfigError(f"unknown config key {key}", key)
    data.setdefault(section, {})[name] = value


def _require(cond, message, key):
    if not cond:
        raise ConfigError(message, key)


def _validate(cfg: ExperimentConfig):
    f, a, d, lo = cfg.federation, cfg.attack, cfg.data, cfg.lora
    try:
        cfg.model_config()
        cfg.reset_schedule()
        cfg.attack_kind()
    except ConfigError:
        raise
    _require(f.n_clients >= 1, "federation.n_clients must be >= 1", "federation.n_clients")
    _require(1 <= f.per_round <= f.n_clients, "federation.per_round must be in [1, n_clients]", "federation.per_round")
    _require(f.rounds >= 1, "federation.rounds must be >= 1", "federation.rounds")
    _require(f.local_epochs >= 0, "federation.local_epochs must be >= 0", "federation.local_epochs")
    _require(f.batch_size >= 1, "federation.batch_size must be >= 1", "federation.batch_size")
    _require(f.clip > 0, "federation.clip must be positive", "federation.clip")
    _require(f.lr >= 0, "federation.lr must be >= 0", "federation.lr")
    _require(a.kind in ATTACK_KINDS, f"unknown attack kind {a.kind!r}", "attack.kind")
    _require(0 <= a.n_attackers <= f.n_clients, "attack.n_attackers must be in [0, n_clients]", "attack.n_attackers")
    _require(0.0 <= a.poison_ratio <= 1.0, "attack.poison_ratio must be in [0, 1]", "attack.poison_ratio")
    _require(0 <= a.target < d.n_classes, "attack.target must be a valid class", "attack.target")
    _require(len(a.window) == 2 and 0 <= a.window[0] <= a.window[1] <= f.rounds,
             "attack.window must be [start, end) within [0, rounds]", "attack.window")
    _require(len(a.trigger_color) == d.image_shape[2], "attack.trigger_color must have one value per channel",
             "attack.trigger_color")
    _require(a.trigger_row >= 0 and a.trigger_col >= 0
             and a.trigger_row + a.trigger_size <= d.image_shape[0]
             and a.trigger_col + a.trigger_size <= d.image_shape[1],
             "trigger patch outside the image", "attack.trigger_size")
    _require(d.train_per_class >= 1 and d.test_per_class >= 1, "data per-class counts must be >= 1",
             "data.train_per_class")
    _require(len(d.size_bounds) == 2, "data.size_bounds must be [lo, hi]", "data.size_bounds")
    _require(cfg.pretrain.head_init in ("zero", "random", "probe"),
             "pretrain.head_init must be \"zero\", \"random\" or \"probe\"",
             "pretrain.head_init")
    _require(lo.init in ("pissa", "standard"), "lora.init must be \"pissa\" or \"standard\"", "lora.init")
    if lo.rank != "full":
        _require(lo.rank >= 1, "lora.rank must be >= 1", "lora.rank")
    _require(cfg.eval.sigma_space in ("model", "trainable"), "eval.sigma_space must be \"model\" or \"trainable\"",
             "eval.sigma_space")
    _require(cfg.eval.period >= 1 and cfg.eval.sigma_period >= 1 and cfg.eval.sigma_lag >= 1,
             "eval periods must be >= 1", "eval.period")


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


def to_toml(cfg: ExperimentConfig) -> str:
    """Render ``cfg`` as TOML text that :func:`load_config` reads back unchanged."""
    lines = []
    for name, body in cfg.to_dict().items():
        lines.append(f"[{name}]")
        for key, value in body.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return json.dumps(v)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    return str(v)
