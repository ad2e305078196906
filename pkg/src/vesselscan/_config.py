"""Plain ``key = value`` config files shared by the phantom and controller."""

from __future__ import annotations

import dataclasses
import os
from typing import Any, Mapping


class ConfigError(ValueError):
    """Raised for malformed or inconsistent configuration."""


def read_keyvalue(path: str | os.PathLike) -> dict[str, str]:
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            values[key] = value
    return values


def write_keyvalue(path: str | os.PathLike, values: Mapping[str, Any]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in values.items():
            if value is None:
                continue
            fh.write(f"{key} = {value}\n")


def coerce_fields(cls: type, values: Mapping[str, str], aliases: Mapping[str, str] | None = None) -> dict[str, Any]:
    """Convert string values to the types of the dataclass fields of ``cls``."""
    aliases = aliases or {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    out: dict[str, Any] = {}
    for key, raw in values.items():
        name = aliases.get(key, key)
        if name not in fields:
            raise ConfigError(f"unknown key {key!r} for {cls.__name__}")
        default = fields[name].default
        try:
            if isinstance(default, bool):
                out[name] = raw.lower() in ("1", "true", "yes", "on")
            elif isinstance(default, int):
                out[name] = int(raw)
            elif isinstance(default, float) or default is None:
                out[name] = None if raw.lower() in ("", "none") else float(raw)
            else:
                out[name] = raw
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {raw!r}") from exc
    return out
