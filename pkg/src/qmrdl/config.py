"""Flat ``key = value`` configuration files.

Keys may carry a section prefix (``solver.alpha``, ``seq.L``,
``data.sigma``).  Lines starting with ``#`` are comments.  Values are kept
as strings; the consumers convert them.
"""
from __future__ import annotations

__all__ = ["ConfigError", "read_keyvalue", "parse_keyvalue", "split_sections",
           "format_keyvalue"]


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def parse_keyvalue(text, source="<string>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = value
    return values


def read_keyvalue(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_keyvalue(text, source=str(path))


def split_sections(values, sections):
    """Group prefixed keys by section; unknown prefixes are an error."""
    out = {s: {} for s in sections}
    for key, value in values.items():
        if "." not in key:
            raise ConfigError(f"key {key!r} has no section prefix "
                              f"(expected one of {', '.join(sections)})")
        section, name = key.split(".", 1)
        if section not in out:
            raise ConfigError(f"unknown config section {section!r} in key {key!r}")
        out[section][name] = value
    return out


def format_keyvalue(values):
    return "".join(f"{k} = {v}\n" for k, v in values.items())
