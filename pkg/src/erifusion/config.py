"""Run configuration files: TOML with [model], [train] and [data] sections."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import tomli

from .errors import ConfigError
from .model import ModelConfig
from .training import TrainConfig


@dataclass
class DataConfig:
    manifest: str = "manifest.jsonl"
    eval_split: str = "test"

    @classmethod
    def from_dict(cls, values: dict) -> "DataConfig":
        unknown = set(values) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown data keys: {sorted(unknown)}")
        return cls(**values)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    source: Path | None = field(default=None, compare=False)

    def manifest_path(self) -> Path:
        path = Path(self.data.manifest)
        if not path.is_absolute() and self.source is not None:
            path = self.source.parent / path
        return path


SECTIONS = {"model": ModelConfig, "train": TrainConfig, "data": DataConfig}


def _coerce(cls, values):
    """Promote TOML integers to floats where the dataclass default is a float."""
    out = {}
    defaults = {f.name: f.default for f in fields(cls)}
    for key, value in values.items():
        default = defaults.get(key)
        if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        out[key] = value
    return out


def parse_config(text: str, source: Path | None = None) -> RunConfig:
    try:
        doc = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source or 'config'}: {exc}") from exc
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    parts = {}
    for name, cls in SECTIONS.items():
        section = doc.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(f"[{name}] must be a table")
        try:
            parts[name] = cls.from_dict(_coerce(cls, section))
        except TypeError as exc:
            raise ConfigError(f"[{name}]: {exc}") from exc
    return RunConfig(parts["model"], parts["train"], parts["data"], source)


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), path)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return json.dumps(value)
    raise ConfigError(f"cannot serialize {value!r}")


def dump_config(cfg: RunConfig) -> str:
    """Canonical document: every key, dataclass order, one section per block."""
    lines = []
    for name in SECTIONS:
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        for key, value in asdict(getattr(cfg, name)).items():
            lines.append(f"{key} = {_toml_value(value)}")
    return "\n".join(lines) + "\n"
