"""Experiment configuration: nested dataclasses loaded from strict TOML."""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError

STRATEGIES = ("fedavg", "fedprox", "bfu", "sfu")
TRANSFORMS = ("identity", "mean_blur_3x3", "half_downsample_restore")
ADAPTER_KINDS = ("conv", "fc")


@dataclass
class DataConfig:
    n_samples: int = 600
    image_size: int = 32
    num_classes: int = 4
    alpha: float = 0.5
    # one entry per client; shorter lists are padded with "identity"
    transforms: list[str] = field(
        default_factory=lambda: ["identity", "mean_blur_3x3", "half_downsample_restore"]
    )
    eval_fraction: float = 0.2


@dataclass
class ModelConfig:
    num_layers: int = 4
    channels: int = 8
    adapter_kinds: list[str] = field(default_factory=lambda: ["conv"])
    adapter_kernel: int = 1
    backbone_kernel: int = 3
    # "stop" truncates the discriminator gradient; "reverse" flips it (ablation only)
    grl_mode: str = "stop"
    grl_scale: float = 1.0


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 16
    disc_kind: str = "sgd"
    disc_lr: float = 0.05


@dataclass
class FederationConfig:
    num_clients: int = 3
    rounds: int = 30
    local_epochs: int = 5
    strategy: str = "sfu"
    delta: float = 0.25
    prox_mu: float = 0.01
    pretext: bool = True
    parallel: bool = False


@dataclass
class SeedConfig:
    data: int = 0
    model: int = 0
    train: int = 0


@dataclass
class OutputConfig:
    out_dir: str = "runs/default"
    mask_every: int = 1
    checkpoints: bool = True


@dataclass
class ExperimentConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> "ExperimentConfig":
        d, m, o, f = self.data, self.model, self.optim, self.federation
        checks = [
            (f.num_clients >= 1, "federation.num_clients", "must be >= 1"),
            (f.rounds >= 0, "federation.rounds", "must be >= 0"),
            (f.local_epochs >= 0, "federation.local_epochs", "must be >= 0"),
            (f.strategy in STRATEGIES, "federation.strategy", f"must be one of {STRATEGIES}"),
            (0.0 <= f.delta <= 1.0, "federation.delta", "must lie in [0, 1]"),
            (f.prox_mu >= 0.0, "federation.prox_mu", "must be >= 0"),
            (d.num_classes >= 2, "data.num_classes", "must be >= 2"),
            (d.num_classes <= 6, "data.num_classes", "at most 6 shape classes are available"),
            (d.image_size >= 16, "data.image_size", "must be >= 16"),
            (d.n_samples >= f.num_clients, "data.n_samples", "must be >= num_clients"),
            (d.alpha > 0.0, "data.alpha", "must be > 0"),
            (all(t in TRANSFORMS for t in d.transforms), "data.transforms", f"entries must be in {TRANSFORMS}"),
            (len(d.transforms) <= f.num_clients, "data.transforms", "more transforms than clients"),
            (0.0 < d.eval_fraction < 1.0, "data.eval_fraction", "must lie in (0, 1)"),
            (m.num_layers >= 1, "model.num_layers", "must be >= 1"),
            (m.channels >= 2, "model.channels", "adapter layers need at least 2 units"),
            (len(m.adapter_kinds) >= 1, "model.adapter_kinds", "must not be empty"),
            (all(k in ADAPTER_KINDS for k in m.adapter_kinds), "model.adapter_kinds", f"entries must be in {ADAPTER_KINDS}"),
            (m.adapter_kernel % 2 == 1, "model.adapter_kernel", "must be odd"),
            (m.backbone_kernel % 2 == 1, "model.backbone_kernel", "must be odd"),
            (m.grl_mode in ("stop", "reverse"), "model.grl_mode", "must be 'stop' or 'reverse'"),
            (o.kind in ("sgd", "adam"), "optim.kind", "must be 'sgd' or 'adam'"),
            (o.disc_kind in ("sgd", "adam"), "optim.disc_kind", "must be 'sgd' or 'adam'"),
            (o.lr >= 0.0, "optim.lr", "must be >= 0"),
            (o.disc_lr >= 0.0, "optim.disc_lr", "must be >= 0"),
            (o.weight_decay >= 0.0, "optim.weight_decay", "must be >= 0"),
            (o.batch_size >= 1, "optim.batch_size", "must be >= 1"),
            (self.output.mask_every >= 1, "output.mask_every", "must be >= 1"),
        ]
        for ok, name, msg in checks:
            if not ok:
                raise ConfigError(msg, name)
        return self

    def client_transforms(self) -> list[str]:
        t = list(self.data.transforms)
        return t + ["identity"] * (self.federation.num_clients - len(t))

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """SHA-256 of everything that determines results (output settings excluded)."""
        d = self.to_dict()
        d.pop("output")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _section_cls(name: str):
    return {
        "data": DataConfig,
        "model": ModelConfig,
        "optim": OptimConfig,
        "federation": FederationConfig,
        "seeds": SeedConfig,
        "output": OutputConfig,
    }[name]


def _coerce(value, default, name: str):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"expected a boolean, got {value!r}", name)
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", name)
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", name)
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", name)
        return value
    if isinstance(default, list):
        if isinstance(value, str):
            value = [value]
        if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
            raise ConfigError(f"expected a list of strings, got {value!r}", name)
        return list(value)
    return value


def from_dict(raw: dict[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Overlay a nested mapping on ``base`` (defaults if omitted); unknown keys are errors."""
    cfg = copy.deepcopy(base) if base is not None else ExperimentConfig()
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a table")
    for section, values in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section (allowed: {sorted(_SECTIONS)})", section)
        if not isinstance(values, dict):
            raise ConfigError("must be a table", section)
        target = getattr(cfg, section)
        known = {f.name for f in dataclasses.fields(_section_cls(section))}
        for key, value in values.items():
            name = f"{section}.{key}"
            if key not in known:
                raise ConfigError(f"unknown key (allowed: {sorted(known)})", name)
            setattr(target, key, _coerce(value, getattr(target, key), name))
    return cfg.validate()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_dict(raw)


def set_field(cfg: ExperimentConfig, dotted: str, value) -> ExperimentConfig:
    """Return a copy of ``cfg`` with one dotted field replaced and revalidated."""
    section, _, key = dotted.partition(".")
    return from_dict({section: {key: value}}, base=cfg)
