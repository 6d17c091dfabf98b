"""``key = value`` text files with ``#`` comments."""

from __future__ import annotations

import math
import os
import tempfile
from pathlib import Path

from .errors import ConfigError, MissingFile


def read_kv(path) -> list[tuple[str, str, int]]:
    path = Path(path)
    if not path.is_file():
        raise MissingFile(f"file not found: {path}")
    return parse_kv(path.read_text(), path)


def parse_kv(text: str, path=None) -> list[tuple[str, str, int]]:
    entries = []
    seen = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", path, line_no)
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError("empty key", path, line_no)
        if key in seen:
            raise ConfigError(f"duplicate key {key!r} (first on line {seen[key]})", path, line_no, key)
        seen[key] = line_no
        entries.append((key, value, line_no))
    return entries


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return " ".join(format_value(v) for v in value)
    return str(value)


def parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_float(text: str) -> float:
    v = float(text)
    if math.isnan(v):
        raise ValueError("NaN is not allowed")
    return v


def parse_floats(text: str, n: int) -> tuple[float, ...]:
    parts = text.replace(",", " ").split()
    if len(parts) != n:
        raise ValueError(f"expected {n} numbers, got {len(parts)}")
    return tuple(parse_float(p) for p in parts)


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
