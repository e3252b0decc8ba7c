"""TOML run configuration, override precedence, and seed splitting.

A config file has one table per stage (``[pretrain]``, ``[train]``,
``[downstream]``, ``[metra]``) whose keys are the fields of the matching
config dataclass. Values resolve as command-line flag > file > default.

Seeds: every stage draws from ``stream_seed(root, stage)``, the first 8 bytes
(big-endian) of ``sha256(f"{root}:{stage}")``, so stages never share streams
and any stage can be rerun alone.
"""

from __future__ import annotations

import dataclasses
import hashlib
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigError


def stream_seed(root, stage):
    digest = hashlib.sha256(f"{int(root)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


def load_config_file(path):
    """Parse a TOML file; a missing or malformed file raises ConfigError."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise ConfigError("--config", f"file not found: {p}")
    try:
        return tomllib.loads(p.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError("--config", f"cannot parse {p}: {exc}") from exc


def _coerce(cls_name, field, value):
    key = f"{cls_name}.{field.name}"
    default = field.default
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false", "1", "0"):
            return value.lower() in ("true", "1")
        raise ConfigError(key, f"expected a boolean, got {value!r}")
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v for v in value.split(",") if v.strip()]
        try:
            return tuple(int(v) for v in value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(key, f"expected a list of integers, got {value!r}") from exc
    try:
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
        if default is None:
            return None if value in (None, "", "none") else int(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(key, f"expected {type(default).__name__}, got {value!r}") from exc
    return value


def resolve(cls, section, file_values=None, overrides=None):
    """Build ``cls`` from defaults, then file values, then overrides."""
    fields = {f.name: f for f in dataclasses.fields(cls)}
    merged = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in fields:
                raise ConfigError(f"{section}.{key}", "unknown key")
            if value is not None:
                merged[key] = _coerce(section, fields[key], value)
    try:
        return cls(**merged)
    except ValueError as exc:
        raise ConfigError(section, str(exc)) from exc


def section(file_dict, name):
    values = file_dict.get(name, {})
    if not isinstance(values, dict):
        raise ConfigError(name, "expected a table")
    return values


def config_fields(cls):
    """(name, default) pairs for building command-line flags."""
    return [(f.name, f.default) for f in dataclasses.fields(cls)]
