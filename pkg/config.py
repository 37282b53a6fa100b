"""
Run configuration: one JSON file with data, model, train, normalization and
paths sections, layered over environment defaults and under command-line
overrides.
"""

import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields

from dataset import SynthConfig
from matching import NormalizationConfig
from model import ModelConfig
from training import TrainConfig


class ConfigError(ValueError):
    """Raised for unknown keys, unparsable values and invalid settings."""


def _env(name, default):
    return lambda: os.getenv(name, default)


@dataclass
class PathsConfig:
    data_manifest: str = field(default_factory=_env("UAMVSE_DATA_DIR", "data"))
    run_dir: str = field(default_factory=_env("UAMVSE_RUN_DIR", os.path.join("runs", "default")))
    results_csv: str = field(default_factory=_env("UAMVSE_RESULTS_CSV", "results.csv"))

    def validate(self):
        return self


SECTIONS = {
    "data": SynthConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "normalization": NormalizationConfig,
    "paths": PathsConfig,
}


@dataclass
class RunConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    normalization: NormalizationConfig = field(default_factory=NormalizationConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self):
        for name in SECTIONS:
            try:
                getattr(self, name).validate()
            except ValueError as e:
                raise ConfigError(f"[{name}] {e}")
        return self

    def to_dict(self):
        return {name: asdict(getattr(self, name)) for name in SECTIONS}


def _coerce(section, key, value, default):
    where = f"{section}.{key}"
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.strip().lower() in ("1", "true", "yes", "on"):
            return True
        if isinstance(value, str) and value.strip().lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where} expects true/false, got {value!r}")
    if isinstance(default, int):
        try:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} expects an integer, got {value!r}")
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} expects a number, got {value!r}")
    if not isinstance(value, str):
        raise ConfigError(f"{where} expects a string, got {value!r}")
    return value


def apply_section(cfg, section, values):
    """Set keys of one section, rejecting names the section does not have."""
    if not isinstance(values, dict):
        raise ConfigError(f"Section '{section}' must be a JSON object")
    target = getattr(cfg, section)
    known = {f.name for f in fields(target)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"Unknown key '{section}.{key}'")
        setattr(target, key, _coerce(section, key, value, getattr(target, key)))


def parse_override(text):
    """'section.key=value' -> (section, key, value)."""
    name, sep, value = text.partition("=")
    section, dot, key = name.strip().partition(".")
    if not sep or not dot or not key:
        raise ConfigError(f"Override '{text}' is not of the form section.key=value")
    if section not in SECTIONS:
        raise ConfigError(f"Unknown section '{section}' in override '{text}'")
    return section, key, value.strip()


def load_run_config(path=None, overrides=()):
    """Defaults, then the JSON file (if any), then section.key=value overrides."""
    cfg = RunConfig()
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})")
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        unknown = sorted(set(data) - set(SECTIONS))
        if unknown:
            raise ConfigError(f"{path}: unknown section(s) {', '.join(unknown)}")
        for section, values in data.items():
            apply_section(cfg, section, values)
        logging.info(f"Loaded run configuration from {path}")

    for text in overrides:
        section, key, value = parse_override(text)
        apply_section(cfg, section, {key: value})
    return cfg.validate()


def save_run_config(cfg, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(cfg.to_dict(), f, indent=2)


def config_help():
    """Every configuration key with its default, for --help epilogs."""
    lines = ["configuration keys (JSON sections or --set section.key=value):"]
    defaults = RunConfig()
    for section in SECTIONS:
        for f in fields(getattr(defaults, section)):
            lines.append(f"  {section}.{f.name} = {getattr(getattr(defaults, section), f.name)!r}")
    return "\n".join(lines)
