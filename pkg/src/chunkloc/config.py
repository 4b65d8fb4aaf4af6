"""key = value configuration files; command-line flags override file values."""

from __future__ import annotations

from pathlib import Path


class ConfigError(ValueError):
    pass


def parse_config_file(path: str | Path) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        values[key] = value
    return values


def coerce(value: str, like) -> object:
    """Convert a config string to the type of an existing default value."""
    if isinstance(like, bool):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return value


def apply_config(defaults: dict, file_values: dict[str, str], overrides: dict) -> dict:
    """Merge precedence: defaults < config file < explicit flags."""
    merged = dict(defaults)
    for key, raw in file_values.items():
        if key not in merged:
            raise ConfigError(f"unknown configuration key {key!r}")
        merged[key] = coerce(raw, merged[key])
    for key, value in overrides.items():
        if value is not None:
            merged[key] = value
    return merged
