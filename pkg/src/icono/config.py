"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored. Keys may be dotted
(``style.per_gender``). Values stay strings until a typed consumer
coerces them.
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def read_kv(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: dict = {}
    problems = []
    for n, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"line {n}: expected 'key = value'")
            continue
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            problems.append(f"line {n}: empty key")
            continue
        values[key] = value
    if problems:
        raise ConfigError(problems)
    return values


def write_kv(values: dict, path) -> None:
    lines = [f"{k} = {format_value(v)}" for k, v in values.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    return str(value)


def coerce(value, kind):
    """Convert a config string to ``kind`` (bool, int, float, str or a tuple of those)."""
    if not isinstance(value, str):
        return value
    if kind is bool:
        low = value.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {value!r}")
    if kind is int:
        return int(value)
    if kind is float:
        return float(value)
    origin = typing.get_origin(kind)
    if origin is tuple:
        inner = typing.get_args(kind)[0]
        return tuple(coerce(v.strip(), inner) for v in value.split(",") if v.strip())
    return value


def dataclass_from_kv(cls, values: dict, prefix: str = "") -> tuple:
    """Build ``cls`` from the keys of ``values`` (optionally under ``prefix``).

    Returns ``(instance_or_None, errors)``; each error names its key.
    """
    hints = typing.get_type_hints(cls)
    kwargs, errors = {}, []
    for f in dataclasses.fields(cls):
        for key in (prefix + f.name, f.name) if prefix else (f.name,):
            if key in values:
                try:
                    kwargs[f.name] = coerce(values[key], hints[f.name])
                except ValueError as exc:
                    errors.append(f"{key}: {exc}")
                break
    if errors:
        return None, errors
    instance = cls(**kwargs)
    validate = getattr(instance, "problems", None)
    if validate is not None:
        errors.extend(f"{prefix}{p}" for p in validate())
    return (instance if not errors else None), errors
