"""Run configuration: training hyperparameters, objective weights, TOML I/O.

Config files are TOML with two sections, ``[train]`` and ``[weights]``;
every omitted key falls back to the reference default, and unknown keys
are rejected so typos cannot silently revert to defaults.  Serialization
is deterministic, so parse -> serialize -> parse is a fixpoint and the
serialized text can be hashed to identify a run.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import tomli

from .errors import ConfigError, ParameterError
from .losses import LossWeights


@dataclass(frozen=True)
class TrainConfig:
    """Optimization schedule and density-control settings."""

    stage_a_iters: int = 3000
    stage_b_iters: int = 1000
    lr_mu: float = 1.6e-4
    lr_rot: float = 1e-3
    lr_scale: float = 5e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-15
    densify_from: int = 500
    densify_until: int = 2400
    densify_interval: int = 300
    # mean screen-space positional gradient, in pixels, above which a splat
    # is cloned or split; tuned for the 96x96 synthetic overfit runs
    densify_grad_threshold: float = 1e-5
    opacity_prune_threshold: float = 0.005
    max_splats: int = 20000
    seed: int = 0

    def __post_init__(self):
        positive = (
            "stage_a_iters", "stage_b_iters", "lr_mu", "lr_rot", "lr_scale",
            "lr_opacity", "lr_sh", "adam_eps", "densify_interval", "max_splats",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ParameterError(f"{name} must be in [0, 1), got {getattr(self, name)}")
        for name in ("densify_from", "densify_until", "densify_grad_threshold",
                     "opacity_prune_threshold", "seed"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be nonnegative, got {getattr(self, name)}")

    def learning_rates(self) -> dict:
        return {
            "mu": self.lr_mu,
            "rot": self.lr_rot,
            "scale": self.lr_scale,
            "opacity": self.lr_opacity,
            "sh": self.lr_sh,
        }


@dataclass(frozen=True)
class RunConfig:
    """Everything a training run needs beyond the scene itself."""

    train: TrainConfig = field(default_factory=TrainConfig)
    weights: LossWeights = field(default_factory=LossWeights)


def _build_section(cls, table: dict, section: str):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in table.items():
        if key not in known:
            raise ConfigError(f"unknown key '{key}' in [{section}]")
        if isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def parse_config(text: str) -> RunConfig:
    """Parse TOML config text; omitted keys keep their defaults."""
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    sections = {"train": TrainConfig, "weights": LossWeights}
    for name in doc:
        if name not in sections:
            raise ConfigError(
                f"unknown config section [{name}]; expected [train] or [weights]"
            )
    return RunConfig(
        train=_build_section(TrainConfig, doc.get("train", {}), "train"),
        weights=_build_section(LossWeights, doc.get("weights", {}), "weights"),
    )


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    if isinstance(value, str):
        return '"' + value.replace("\\", "\\\\").replace('"', '\\"') + '"'
    raise ConfigError(f"cannot serialize config value {value!r}")


def serialize_config(run: RunConfig) -> str:
    """Deterministic TOML text for a RunConfig (field-declaration order)."""
    lines = []
    for section, obj in (("train", run.train), ("weights", run.weights)):
        lines.append(f"[{section}]")
        for f in fields(obj):
            lines.append(f"{f.name} = {_toml_value(getattr(obj, f.name))}")
        lines.append("")
    return "\n".join(lines)


def config_hash(run: RunConfig) -> str:
    """Content hash identifying a run configuration."""
    return hashlib.sha256(serialize_config(run).encode("utf-8")).hexdigest()
