"""Flat key=value config files.

One ``key = value`` pair per line; blank lines and ``#`` comments are
ignored. Values are coerced by the caller-supplied field table, so unknown
keys and unparseable values fail loudly instead of silently defaulting.
"""

from __future__ import annotations

from pathlib import Path

from .errors import ConfigError

_BOOL_WORDS = {
    "true": True,
    "false": False,
    "yes": True,
    "no": False,
    "1": True,
    "0": False,
}


def parse_kv_file(path: str | Path) -> dict[str, str]:
    """Read a flat key=value file into an ordered dict of raw strings.

    Raises:
        ConfigError: missing file, a line without '=', or a repeated key.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def coerce_value(key: str, text: str, target_type: type):
    """Convert one raw string to ``target_type``, raising ConfigError on failure."""
    try:
        if target_type is bool:
            word = text.lower()
            if word not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {text!r}")
            return _BOOL_WORDS[word]
        if target_type is int:
            return int(text)
        if target_type is float:
            return float(text)
        if target_type is str:
            return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {exc}") from None
    raise ConfigError(f"no coercion for {key!r} to {target_type.__name__}")


def apply_kv(pairs: dict[str, str], field_types: dict[str, type]) -> dict[str, object]:
    """Coerce raw pairs against a field table; unknown keys are ConfigError."""
    out: dict[str, object] = {}
    for key, text in pairs.items():
        if key not in field_types:
            known = ", ".join(sorted(field_types))
            raise ConfigError(f"unknown config key {key!r} (known: {known})")
        out[key] = coerce_value(key, text, field_types[key])
    return out
