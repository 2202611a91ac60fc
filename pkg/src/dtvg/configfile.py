"""Key-value config files.

One `key = value` pair per line; `#` starts a comment; blank lines ignored.
Values are parsed as int, then float, then bool ("true"/"false"), then a
comma-separated list of those, else kept as a string. Keys use snake_case
and map one-to-one onto dataclass fields, so a file can override any subset
of a config's defaults.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, TypeVar, Union

T = TypeVar("T")


def _parse_scalar(text: str) -> Any:
    text = text.strip()
    low = text.lower()
    if low == "true":
        return True
    if low == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        pass
    return text


def parse_config_text(text: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ValueError(f"line {lineno}: empty key")
        if "," in value:
            out[key] = [_parse_scalar(v) for v in value.split(",")]
        else:
            out[key] = _parse_scalar(value)
    return out


def load_config_file(path: Union[str, Path]) -> dict[str, Any]:
    return parse_config_text(Path(path).read_text())


def apply_overrides(config: T, overrides: dict[str, Any]) -> T:
    """Rebuild a dataclass with the given field overrides; unknown keys fail."""
    names = {f.name for f in dataclasses.fields(config)}
    unknown = sorted(set(overrides) - names)
    if unknown:
        raise ValueError(f"unknown config keys: {unknown}")
    return dataclasses.replace(config, **overrides)


def dump_config(config: Any) -> str:
    lines = []
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        if isinstance(value, (list, tuple)):
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name} = {value}")
    return "\n".join(lines) + "\n"
