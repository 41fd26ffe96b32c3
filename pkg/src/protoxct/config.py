"""Flat run configuration: defaults, ``key = value`` files and CLI overrides.

Every tunable of the pipeline is one field of :class:`RunConfig`. A config
file holds one ``key = value`` per line (``#`` starts a comment); unknown
keys and unparsable values are errors. The fully resolved config is written
next to every output so a run can be repeated exactly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .data import VolumeSpec
from .loss import LossWeights
from .train import TrainConfig

__all__ = ["RunConfig", "ConfigError", "parse_config_text", "read_config", "write_config", "parse_value"]


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 7
    threads: int = 1

    # synthetic data
    volumes: int = 3
    samples_per_volume: int = 5000
    depth: int = 4
    height: int = 930
    width: int = 1485
    defect_density: float = 1.0
    pore_density: float = 6.0
    line_density: float = 3.0
    edge_fraction: float = 0.3
    ratio: float = 2.0
    min_defect_px: int = 100
    min_component: int = 50
    min_sliver: float = 0.25
    max_defect_air: float = 0.25
    pure_fraction: float = 0.002

    # encoder
    dim: int = 64
    channels: str = "8,16"
    frozen_stages: int = 2
    warmup_epochs: int = 25

    # training
    lr_head: float = 5e-4
    lr_backbone: float = 5e-6
    weight_decay: float = 1e-4
    clip_norm: float = 1.0
    patience: int = 50
    sched_patience: int = 10
    batch_size: int = 8
    max_epochs: int = 200
    augment: bool = True
    finetune_encoder: bool = True
    tau0: float = 1.0
    baseline_lr: float = 5e-5
    baseline: bool = False

    # loss
    w_cls: float = 0.1
    w_pull: float = 0.05
    w_push: float = 0.01
    w_div: float = 1.0
    w_ent: float = 0.01
    w_usage: float = 0.1
    w_anchor: float = 2.0
    w_medoid: float = 0.5
    w_proto: float = 1e-6
    w_tau: float = 1e-4
    tau_push: float = 0.1
    delta: float = 0.7
    entropy_scope: str = "within_class"

    # evaluation and maps
    replicates: int = 2000
    ece_bins: int = 15
    stride: int = 64
    volume_index: int = 0
    slice_index: int = 0
    k_nearest: int = 5

    def __post_init__(self):
        try:
            self.channel_widths()
            self.volume_spec()
            self.loss_weights()
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.volumes < 1 or self.samples_per_volume < 1:
            raise ConfigError("volumes and samples_per_volume must be >= 1")

    def channel_widths(self) -> tuple[int, ...]:
        try:
            widths = tuple(int(c) for c in self.channels.split(",") if c.strip())
        except ValueError:
            raise ValueError(f"channels must be comma-separated integers, got {self.channels!r}") from None
        if not widths or min(widths) < 1:
            raise ValueError("channels must list positive widths")
        return widths

    def volume_spec(self) -> VolumeSpec:
        return VolumeSpec(
            depth=self.depth,
            height=self.height,
            width=self.width,
            pore_density=self.pore_density * self.defect_density,
            line_density=self.line_density * self.defect_density,
            edge_fraction=self.edge_fraction,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            cls=self.w_cls,
            pull=self.w_pull,
            push=self.w_push,
            div=self.w_div,
            ent=self.w_ent,
            usage=self.w_usage,
            anchor=self.w_anchor,
            medoid=self.w_medoid,
            proto=self.w_proto,
            tau=self.w_tau,
            tau_push=self.tau_push,
            delta=self.delta,
            entropy_scope=self.entropy_scope,
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_head=self.lr_head,
            lr_backbone=self.lr_backbone,
            weight_decay=self.weight_decay,
            clip_norm=self.clip_norm,
            patience=self.patience,
            sched_patience=self.sched_patience,
            batch_size=self.batch_size,
            max_epochs=self.max_epochs,
            seed=self.seed,
            augment=self.augment,
            tau0=self.tau0,
            baseline_lr=self.baseline_lr,
        )

    def replace(self, **changes) -> "RunConfig":
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(unknown))}")
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def parse_value(key: str, text: str):
    """Convert ``text`` to the type of config field ``key``."""
    if key not in _TYPES:
        raise ConfigError(f"unknown config key: {key}")
    kind = _TYPES[key]
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key} ({kind}): {text!r}") from None


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise ConfigError(f"{source}:{n}: duplicate key {key}")
        if key not in _TYPES:
            raise ConfigError(f"{source}:{n}: unknown config key: {key}")
        out[key] = parse_value(key, value)
    return out


def read_config(path, base: RunConfig | None = None) -> RunConfig:
    values = parse_config_text(Path(path).read_text(), str(path))
    return (base or RunConfig()).replace(**values)


def write_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_text())
