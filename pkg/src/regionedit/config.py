"""key=value configuration files.

One assignment per line, `#` starts a comment, blank lines ignored.
Keys are namespaced with dots; the first segment routes the entry to a
section (model.*, pipeline.*, train.*, bench.*). Values are coerced by
the type annotation of the target dataclass field; `none` is None,
booleans are `true`/`false`, lists are comma-separated.

The environment variable REGIONEDIT_CONFIG names a default config file
used when a command is not given one explicitly.
"""

from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path

from .errors import ConfigError

ENV_CONFIG = "REGIONEDIT_CONFIG"


def parse_kv_text(text: str, origin: str = "<config>") -> dict:
    out = {}
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{ln}: expected key=value, got {raw!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{origin}:{ln}: empty key")
        if key in out:
            raise ConfigError(f"{origin}:{ln}: duplicate key {key!r}")
        out[key] = val.strip()
    return out


def parse_kv_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_kv_text(path.read_text(), str(path))


def default_config_path():
    """Path from REGIONEDIT_CONFIG, or None when unset."""
    value = os.environ.get(ENV_CONFIG, "").strip()
    return Path(value) if value else None


def split_sections(flat: dict) -> dict:
    """Group dotted keys by first segment: {'model': {'layers': '4'}, ...}"""
    out = {}
    for key, val in flat.items():
        if "." not in key:
            raise ConfigError(
                f"config key {key!r} needs a section prefix like model.{key}")
        section, _, rest = key.partition(".")
        out.setdefault(section, {})[rest] = val
    return out


def _coerce(raw: str, annotation: str, key: str):
    if raw.lower() == "none":
        return None
    ann = str(annotation)
    try:
        if ann == "int":
            return int(raw)
        if ann == "float":
            return float(raw)
        if ann == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(f"not a bool: {raw!r}")
        if ann.startswith(("tuple", "list")):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            inner = float if "float" in ann else int
            return tuple(inner(p) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key}: {exc}") from exc


def build_dataclass(cls, strs: dict, section: str = ""):
    """Instantiate a dataclass from string values, coercing by field type."""
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, raw in strs.items():
        if key not in known:
            raise ConfigError(
                f"unknown config key {section + '.' if section else ''}{key} "
                f"for {cls.__name__}; known: {sorted(known)}")
        kwargs[key] = _coerce(raw, known[key].type, key)
    return cls(**kwargs)
