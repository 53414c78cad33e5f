"""One declarative run configuration covering every tunable.

Values merge in precedence order: dataclass defaults, then the JSON file,
then VOXSEG_* environment variables, then explicit overrides (CLI flags).
Keys are dotted paths (train.epochs, model.backbone.channels); environment
variables spell the dots as double underscores (VOXSEG_TRAIN__EPOCHS).
Unknown keys are rejected outright.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .backbone import BackboneConfig
from .data import AugmentConfig, PhantomSpec
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig

ENV_PREFIX = "VOXSEG_"

_SECTIONS = {
    "phantom": PhantomSpec,
    "augment": AugmentConfig,
    "model": ModelConfig,
    "train": TrainConfig,
}
_NESTED = {("model", "backbone"): BackboneConfig}
_TOP_KEYS = ("seed", "threads")


@dataclass
class RunConfig:
    """Everything one invocation needs, fully validated."""

    seed: int = 0
    threads: int = 1
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.seed = int(self.seed)
        self.threads = int(self.threads)
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.threads < 1:
            raise ConfigError(f"threads must be positive, got {self.threads}")


def config_keys() -> tuple:
    """Every dotted configuration key, in a stable order."""
    keys = list(_TOP_KEYS)
    for section, cls in _SECTIONS.items():
        for f in dataclasses.fields(cls):
            if (section, f.name) in _NESTED:
                for sub in dataclasses.fields(_NESTED[(section, f.name)]):
                    keys.append(f"{section}.{f.name}.{sub.name}")
            else:
                keys.append(f"{section}.{f.name}")
    return tuple(keys)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _flatten(obj, prefix=""):
    out = {}
    for key, value in obj.items():
        if not isinstance(key, str):
            raise ConfigError(f"configuration keys must be strings, got {key!r}")
        dotted = f"{prefix}{key}"
        if isinstance(value, dict):
            out.update(_flatten(value, f"{dotted}."))
        else:
            out[dotted] = value
    return out


def _env_assignments(env) -> dict:
    out = {}
    for name, raw in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX):].lower().replace("__", ".")
        out[dotted] = _parse_value(raw)
    return out


def run_config_to_dict(config: RunConfig) -> dict:
    """Nested plain-dict form, round-trippable through load_run_config."""
    return dataclasses.asdict(config)


def load_run_config(path=None, env=None, overrides=None) -> RunConfig:
    """Resolve the full configuration; see the module docstring for the
    precedence order.  `overrides` maps dotted keys to raw string values."""
    known = set(config_keys())
    assignments = {}

    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"{p}: no such configuration file")
        try:
            obj = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{p}: invalid JSON ({e})") from e
        if not isinstance(obj, dict):
            raise ConfigError(f"{p}: configuration must be a JSON object")
        assignments.update(_flatten(obj))

    env = os.environ if env is None else env
    assignments.update(_env_assignments(env))

    for key, raw in (overrides or {}).items():
        assignments[key] = _parse_value(raw) if isinstance(raw, str) else raw

    for key in assignments:
        if key not in known:
            raise ConfigError(f"unknown configuration key {key!r}")

    # A run-level seed stands in for the training seed unless that was set.
    if "seed" in assignments and "train.seed" not in assignments:
        assignments["train.seed"] = assignments["seed"]

    tree: dict = {}
    for dotted, value in assignments.items():
        parts = dotted.split(".")
        node = tree
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value

    kwargs = {}
    for key in _TOP_KEYS:
        if key in tree:
            kwargs[key] = tree.pop(key)
    for section, cls in _SECTIONS.items():
        body = tree.pop(section, {})
        try:
            kwargs[section] = cls(**body)
        except TypeError as e:
            raise ConfigError(f"section {section!r}: {e}") from e
    return RunConfig(**kwargs)
