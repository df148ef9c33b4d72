"""Run configuration: INI sections mirroring the module configs.

``[data]`` maps to :class:`SamplingConfig`, ``[model]`` to :class:`ModelConfig`
and ``[train]`` to :class:`TrainConfig`. Values from the file are overridden
by dotted ``section.key=value`` pairs; unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
import typing
from pathlib import Path

from nfcsi.dataset import SamplingConfig
from nfcsi.model import ModelConfig
from nfcsi.training import TrainConfig

SECTIONS = {"data": SamplingConfig, "model": ModelConfig, "train": TrainConfig}
_SKIP = {"train": {"model"}}


class ConfigError(ValueError):
    pass


def _fields(section: str) -> dict[str, type]:
    cls = SECTIONS[section]
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)
            if f.name not in _SKIP.get(section, ())}


def _parse(text: str, hint) -> object:
    text = text.strip()
    origin, args = typing.get_origin(hint), typing.get_args(hint)
    if type(None) in args:
        if text.lower() in ("", "none"):
            return None
        hint = next(a for a in args if a is not type(None))
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if origin is tuple:
        parts = [p for p in text.replace("(", "").replace(")", "").split(",") if p.strip()]
        return tuple(_parse(p, args[0]) for p in parts)
    if hint is bool:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if isinstance(hint, type):
        return hint(text)
    return text


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(repr(v) for v in value)
    if hasattr(value, "value"):  # enums
        return str(value.value)
    return "none" if value is None else repr(value) if isinstance(value, float) else str(value)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> dict[str, dict]:
    """Raw per-section values (typed) from an optional INI file plus overrides."""
    values: dict[str, dict] = {name: {} for name in SECTIONS}
    if path is not None:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"cannot read config file {path}")
        for section in parser.sections():
            if section not in SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            for key, text in parser.items(section):
                _set(values, section, key, text)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, text = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        _set(values, section, key, text)
    return values


def _set(values: dict, section: str, key: str, text: str) -> None:
    fields = _fields(section)
    if key not in fields:
        raise ConfigError(f"unknown key {section}.{key}")
    try:
        values[section][key] = _parse(text, fields[key])
    except ValueError as exc:
        raise ConfigError(f"{section}.{key}: {exc}") from exc


def sampling_config(values: dict) -> SamplingConfig:
    return _build(SamplingConfig, values["data"])


def model_config(values: dict) -> ModelConfig:
    return _build(ModelConfig, values["model"])


def train_config(values: dict) -> TrainConfig:
    return _build(TrainConfig, {**values["train"], "model": model_config(values)})


def _build(cls, kwargs: dict):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {cls.__name__}: {exc}") from exc


def effective_config(values: dict) -> configparser.ConfigParser:
    """Fully resolved config (defaults filled in) for echoing next to outputs."""
    resolved = {
        "data": sampling_config(values),
        "model": model_config(values),
        "train": train_config(values),
    }
    parser = configparser.ConfigParser()
    for section, obj in resolved.items():
        parser[section] = {name: _format(getattr(obj, name)) for name in _fields(section)}
    return parser


def write_effective_config(values: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        effective_config(values).write(fh)
    return path
