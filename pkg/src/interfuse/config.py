"""Flat ``key = value`` config files and layered resolution.

Resolution order is defaults < config file < explicit flags.  Unknown keys
are errors so that typos never pass silently.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path
from typing import Any

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def coerce(tp, value: Any, key: str = "?"):
    """Convert ``value`` (often a string) to the annotated field type ``tp``."""
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None or (isinstance(value, str) and value.lower() in ("", "none", "null")):
            return None
        inner = [a for a in args if a is not type(None)]
        return coerce(inner[0], value, key)
    try:
        if origin is tuple:
            items = value.split(",") if isinstance(value, str) else list(value)
            elem = args[0] if args else str
            return tuple(coerce(elem, v.strip() if isinstance(v, str) else v, key) for v in items)
        if tp is bool:
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in _TRUE:
                return True
            if text in _FALSE:
                return False
            raise ValueError(value)
        if tp is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if tp is float:
            return float(value)
        if tp is str:
            return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid value {value!r} for {key}") from exc
    return value


def resolve(cls, file_values: dict | None = None, flag_values: dict | None = None):
    """Instantiate dataclass ``cls`` from defaults, then file values, then flags."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    merged: dict[str, Any] = {}
    for source, values in (("config file", file_values or {}), ("flags", flag_values or {})):
        unknown = sorted(set(values) - names)
        if unknown:
            raise ConfigError(f"unknown {source} key(s): {', '.join(unknown)}")
        for key, value in values.items():
            merged[key] = coerce(hints[key], value, key)
    return cls(**merged)


def format_config(cfg) -> str:
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, (tuple, list)):
            value = ",".join(str(v) for v in value)
        elif value is None:
            value = "none"
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"


def config_to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out
