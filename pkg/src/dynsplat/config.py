"""Pipeline configuration: dataclass defaults, INI-style config files,
CLI overrides. Precedence: defaults < file < explicit flags."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields
from pathlib import Path

from .features import BackendConfig
from .mapping import MappingLossWeights
from .motion import MotionLossWeights
from .tracking import TrackingConfig


class ConfigError(ValueError):
    pass


@dataclass
class MotionConfig:
    queue_capacity: int = 4      # history length L (paper-scale runs use 12)
    num_heads: int = 4
    dilation_radius: int = 2
    lambda1: float = 1.0
    lambda2: float = 0.1
    lambda3: float = 1.0
    train_steps: int = 500
    train_sequences: int = 8
    frames_per_sequence: int = 6
    batch_size: int = 2
    learning_rate: float = 1e-3

    def loss_weights(self) -> MotionLossWeights:
        return MotionLossWeights(self.lambda1, self.lambda2, self.lambda3)


@dataclass
class MapConfig:
    k_neighbors: int = 10
    insert_stride: int = 2
    iters_per_keyframe: int = 40
    final_iters: int = 60
    keyframe_window: int = 3
    uncertainty_steps: int = 10
    uncertainty_hidden: int = 16
    learning_rate: float = 1e-2
    truncate_sigma: float = 3.0
    weights: MappingLossWeights = field(default_factory=MappingLossWeights)


@dataclass
class PipelineConfig:
    backend: BackendConfig = field(default_factory=BackendConfig)
    motion: MotionConfig = field(default_factory=MotionConfig)
    tracking: TrackingConfig = field(default_factory=TrackingConfig)
    mapping: MapConfig = field(default_factory=MapConfig)
    seed: int = 0
    verbose: bool = False

    def validate(self) -> None:
        checks = [
            ("motion.queue_capacity", self.motion.queue_capacity >= 1),
            ("motion.dilation_radius", self.motion.dilation_radius >= 0),
            ("motion.num_heads", self.motion.num_heads >= 1),
            ("backend.channels", self.backend.channels >= 1),
            ("backend.channels % motion.num_heads",
             self.backend.channels % self.motion.num_heads == 0),
            ("tracking.grid_size", self.tracking.grid_size >= 4),
            ("tracking.num_edges_back", self.tracking.num_edges_back >= 1),
            ("tracking.lambda_depth", self.tracking.lambda_depth >= 0),
            ("tracking.lambda_smooth", self.tracking.lambda_smooth >= 0),
            ("mapping.k_neighbors", self.mapping.k_neighbors >= 1),
            ("mapping.insert_stride", self.mapping.insert_stride >= 1),
            ("mapping.weights.t_max", self.mapping.weights.t_max > 0),
            ("backend.backend", self.backend.backend in ("synthetic", "file")),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"invalid configuration value for {key}")
        # loss-weight dataclasses self-validate on construction
        self.motion.loss_weights()


_SECTIONS = {
    "backend": lambda cfg: cfg.backend,
    "motion": lambda cfg: cfg.motion,
    "tracking": lambda cfg: cfg.tracking,
    "mapping": lambda cfg: cfg.mapping,
    "mapping.weights": lambda cfg: cfg.mapping.weights,
}


def _coerce(current, raw: str):
    if isinstance(current, bool):
        return raw.lower() in ("1", "true", "yes", "on")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if current is None:
        return raw
    return type(current)(raw)


def load_config(path: str | Path | None = None,
                overrides: dict[str, str] | None = None) -> PipelineConfig:
    """Build a PipelineConfig from an optional INI file plus overrides of
    the form {"section.key": "value"}. Unknown keys are rejected."""
    cfg = PipelineConfig()
    items: list[tuple[str, str, str]] = []
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section == "run":
                for key, raw in parser.items(section):
                    items.append(("run", key, raw))
                continue
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                items.append((section, key, raw))
    for dotted, raw in (overrides or {}).items():
        if "." not in dotted:
            items.append(("run", dotted, raw))
        else:
            section, key = dotted.rsplit(".", 1)
            items.append((section, key, raw))
    for section, key, raw in items:
        if section == "run":
            if key == "seed":
                cfg.seed = int(raw)
            elif key == "verbose":
                cfg.verbose = raw.lower() in ("1", "true", "yes", "on")
            else:
                raise ConfigError(f"unknown run option {key!r}")
            continue
        target = _SECTIONS[section](cfg)
        names = {f.name for f in fields(target)}
        if key not in names:
            raise ConfigError(f"unknown config key {section}.{key}")
        setattr(target, key, _coerce(getattr(target, key), raw))
    # backend.seed defines the synthetic feature projection and must stay
    # stable between training and inference, so the run seed does not
    # override it; set backend.seed explicitly to change feature spaces.
    cfg.validate()
    return cfg


def config_echo(cfg: PipelineConfig) -> dict[str, object]:
    echo: dict[str, object] = {"seed": cfg.seed}
    for section, getter in _SECTIONS.items():
        target = getter(cfg)
        for f in fields(target):
            if f.name == "weights":
                continue
            echo[f"{section}.{f.name}"] = getattr(target, f.name)
    return echo
