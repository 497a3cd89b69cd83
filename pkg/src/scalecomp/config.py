"""One config file for every tunable, grouped by module, with CLI overrides.

The YAML file has four sections — data, model, train, eval — whose keys are
exactly the fields of SynthConfig, ModelConfig, TrainConfig and EvalConfig.
Flat override keys use "section.key" form; unknown keys are rejected. Every
command echoes its effective config into the output directory.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .data import SynthConfig
from .detector import ModelConfig, TrainConfig
from .errors import ConfigError


@dataclass
class EvalConfig:
    interpolation: str = "q_points"  # or "coco101"
    falarm_iou: float = 0.5
    falarm_score: float = 0.3
    stats_per_category: bool = False


@dataclass
class RunConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _coerce(section: str, key: str, current, value):
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{key} expects a list, got {value!r}")
        return tuple(value)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} expects a boolean, got {value!r}")
        return value
    if isinstance(current, int) and not isinstance(value, bool) and isinstance(value, (int, float)):
        if float(value) != int(value):
            raise ConfigError(f"{section}.{key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(current, float) and isinstance(value, (int, float)):
        return float(value)
    if isinstance(current, str) and isinstance(value, str):
        return value
    if type(current) is type(value):
        return value
    raise ConfigError(
        f"{section}.{key} expects {type(current).__name__}, got {value!r}"
    )


def _apply_section(cfg: RunConfig, section: str, updates: dict):
    if not hasattr(cfg, section):
        raise ConfigError(f"unknown config section '{section}'")
    target = getattr(cfg, section)
    names = {f.name for f in dataclasses.fields(target)}
    for key, value in updates.items():
        if key not in names:
            raise ConfigError(f"unknown config key '{section}.{key}'")
        setattr(target, key, _coerce(section, key, getattr(target, key), value))


def load_config(path: str | Path | None = None,
                overrides: dict[str, object] | None = None) -> RunConfig:
    """Defaults, then file values, then flat "section.key" overrides."""
    cfg = RunConfig()
    if path is not None:
        raw = yaml.safe_load(Path(path).read_text())
        if raw is None:
            raw = {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config root must be a mapping")
        for section, updates in raw.items():
            if not isinstance(updates, dict):
                raise ConfigError(f"{path}: section '{section}' must be a mapping")
            _apply_section(cfg, str(section), updates)
    for flat_key, value in (overrides or {}).items():
        if "." not in flat_key:
            raise ConfigError(f"override key '{flat_key}' must look like section.key")
        section, key = flat_key.split(".", 1)
        _apply_section(cfg, section, {key: value})
    cfg.data.validate()
    cfg.train.validate()
    if cfg.eval.interpolation not in ("q_points", "coco101"):
        raise ConfigError(f"unknown eval.interpolation '{cfg.eval.interpolation}'")
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    def clean(value):
        if isinstance(value, tuple):
            return [clean(v) for v in value]
        if isinstance(value, dict):
            return {k: clean(v) for k, v in value.items()}
        return value

    return {
        section: clean(dataclasses.asdict(getattr(cfg, section)))
        for section in ("data", "model", "train", "eval")
    }


def echo_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    """Write the effective config so the run can be reproduced bit-for-bit."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.yaml"
    path.write_text(yaml.safe_dump(config_to_dict(cfg), sort_keys=True))
    return path
