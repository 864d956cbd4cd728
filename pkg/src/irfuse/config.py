"""Flat ``key = value`` config files applied onto dataclass configs."""

from __future__ import annotations

import ast
import dataclasses
from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, value = (x.strip() for x in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        out[key] = value
    return out


def load_kv(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {path} does not exist")
    return parse_kv(path.read_text())


def _coerce(raw, current):
    if not isinstance(raw, str):
        return raw
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, str):
        return raw
    if current is None and raw.lower() == "none":
        return None
    try:
        value = ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        return raw
    if isinstance(current, tuple) and isinstance(value, list):
        value = tuple(value)
    return value


def apply_overrides(config, overrides: dict):
    """Return a copy of dataclass ``config`` with string or typed overrides applied."""
    names = {f.name for f in dataclasses.fields(config)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise ConfigError(f"unknown config keys {unknown} for {type(config).__name__}")
    values = {}
    for key, raw in overrides.items():
        try:
            values[key] = _coerce(raw, getattr(config, key))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
    return dataclasses.replace(config, **values)


def dump_kv(config) -> str:
    lines = []
    for f in dataclasses.fields(config):
        v = getattr(config, f.name)
        lines.append(f"{f.name} = {v if isinstance(v, str) else repr(v)}\n")
    return "".join(lines)
