"""INI configuration: one section per component, flat ``key = value`` pairs.

Precedence is command-line override > file > built-in default.  Every value
is parsed against the type of the matching dataclass field and the
dataclass's own validation runs before any work starts.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
import types
import typing
from dataclasses import dataclass, fields
from pathlib import Path

from .dsp import FeatureConfig
from .experiments import ExperimentConfig
from .inference import DecodeOptions
from .losses import LossConfig
from .model import ModelConfig
from .training import TrainConfig

SECTIONS = {
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "decode": DecodeOptions,
    "features": FeatureConfig,
    "experiment": ExperimentConfig,
}
CONFIG_VERSION = 1


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending key path."""


@dataclass
class RunConfig:
    model: ModelConfig
    loss: LossConfig
    train: TrainConfig
    decode: DecodeOptions
    features: FeatureConfig
    experiment: ExperimentConfig

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser["meta"] = {"version": str(CONFIG_VERSION)}
        for name in SECTIONS:
            obj = getattr(self, name)
            parser[name] = {f.name: format_value(getattr(obj, f.name)) for f in fields(obj)}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def snapshot(self, out_dir) -> Path:
        path = Path(out_dir) / "config.resolved.ini"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini(), encoding="utf-8")
        return path


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _strip_optional(tp):
    args = typing.get_args(tp)
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType) and type(None) in args:
        rest = [a for a in args if a is not type(None)]
        return rest[0], True
    return tp, False


def parse_value(raw: str, tp, key: str):
    tp, optional = _strip_optional(tp)
    text = raw.strip()
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {text!r}")
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is str:
            return text
        if typing.get_origin(tp) is tuple:
            inner = typing.get_args(tp)[0]
            return tuple(parse_value(p, inner, key) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None
    raise ConfigError(f"{key}: unsupported field type {tp}")


def _field_types(cls) -> dict:
    return typing.get_type_hints(cls)


def describe_defaults() -> str:
    """Every section, key and default, for ``--help``."""
    lines = ["configuration keys (section.key = default):"]
    for name, cls in SECTIONS.items():
        obj = cls()
        for f in fields(cls):
            lines.append(f"  {name}.{f.name} = {format_value(getattr(obj, f.name))}")
    return "\n".join(lines)


def parse_override(text: str) -> tuple[str, str, str]:
    if "=" not in text:
        raise ConfigError(f"{text}: override must look like section.key=value")
    path, value = text.split("=", 1)
    if "." not in path:
        raise ConfigError(f"{path}: override key must be section.key")
    section, key = path.strip().split(".", 1)
    return section, key, value


def load_config(path=None, overrides=()) -> RunConfig:
    """Resolve defaults, an optional INI file and ``section.key=value`` overrides."""
    values: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
        for section in parser.sections():
            if section == "meta":
                continue
            if section not in SECTIONS:
                raise ConfigError(f"{section}: unknown section")
            values[section].update(parser[section])
    for item in overrides:
        section, key, value = parse_override(item)
        if section not in SECTIONS:
            raise ConfigError(f"{section}: unknown section")
        values[section][key] = value
    built = {}
    for name, cls in SECTIONS.items():
        types_ = _field_types(cls)
        kwargs = {}
        for key, raw in values[name].items():
            if key not in types_:
                raise ConfigError(f"{name}.{key}: unknown key")
            kwargs[key] = parse_value(raw, types_[key], f"{name}.{key}")
        try:
            built[name] = cls(**kwargs)
        except (ValueError, TypeError) as exc:
            bad = next((k for k in kwargs if k in str(exc)), None)
            where = f"{name}.{bad}" if bad else name
            raise ConfigError(f"{where}: {exc}") from None
    return RunConfig(**built)


def replace(cfg, **changes):
    return dataclasses.replace(cfg, **changes)
