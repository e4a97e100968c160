"""Flat ``key = value`` run configuration.

Keys are field names of :class:`TrainConfig` or :class:`NetworkConfig`.
Blank lines and ``#`` comments are ignored. Lists and triples are written
comma-separated (``stages = 2, 2``); booleans as ``true``/``false``.
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError
from .model import NetworkConfig
from .train import TrainConfig

_BOOLS = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


def _field_types(cls) -> dict[str, object]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


TRAIN_KEYS = _field_types(TrainConfig)
NETWORK_KEYS = _field_types(NetworkConfig)


def _convert(key: str, text: str, kind):
    origin = typing.get_origin(kind)
    if origin in (list, tuple):
        items = [t.strip() for t in text.strip("[]() ").split(",") if t.strip()]
        inner = typing.get_args(kind)[0]
        return origin(_convert(key, t, inner) for t in items)
    if kind is bool:
        try:
            return _BOOLS[text.lower()]
        except KeyError:
            raise ConfigError(f"{key}: expected true or false, got {text!r}") from None
    if kind is int:
        try:
            return int(text)
        except ValueError:
            raise ConfigError(f"{key}: expected an integer, got {text!r}") from None
    if kind is float:
        try:
            return float(text)
        except ValueError:
            raise ConfigError(f"{key}: expected a number, got {text!r}") from None
    return text


def parse_config(text: str) -> tuple[dict, dict]:
    """Split a config text into ``(train_overrides, network_overrides)``."""
    train, network = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in TRAIN_KEYS:
            target, kind = train, TRAIN_KEYS[key]
        elif key in NETWORK_KEYS:
            target, kind = network, NETWORK_KEYS[key]
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in train or key in network:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        target[key] = _convert(key, value, kind)
    TrainConfig(**train)  # validate early so bad values fail at parse time
    return train, network


def load_config(path) -> tuple[dict, dict]:
    return parse_config(Path(path).read_text())
