"""Key-value run configuration.

Sources, highest priority first: command-line flags, the ``--config`` file,
``dave.conf`` in the user config directory, built-in defaults.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Any, Dict, Mapping, Optional

from dave import settings
from dave.errors import ConfigError

APP_NAME = "DAVE"
USER_CONFIG_FILE = "dave.conf"


def _get_user_config_dir() -> str:
    """User config directory (cross-platform), overridable via DAVE_CONFIG_HOME."""
    override = os.environ.get(settings.ENV_CONFIG_HOME)
    if override:
        return override
    if os.name == "nt":
        base = os.environ.get("APPDATA") or os.environ.get("LOCALAPPDATA")
        if not base:
            base = os.path.expanduser("~")
        return os.path.join(base, APP_NAME)

    xdg = os.environ.get("XDG_CONFIG_HOME")
    if xdg:
        return os.path.join(xdg, APP_NAME)
    return os.path.join(os.path.expanduser("~"), ".config", APP_NAME)


def get_user_config_path() -> str:
    return os.path.join(_get_user_config_dir(), USER_CONFIG_FILE)


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_").lower()


def parse_kv_text(text: str, source: str = "<text>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = line.split("=", 1)
        key = normalize_key(key)
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def load_kv_file(path: str) -> Dict[str, str]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return parse_kv_text(f.read(), source=path)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None


def load_user_config() -> Dict[str, str]:
    path = get_user_config_path()
    if not os.path.exists(path):
        return {}
    return load_kv_file(path)


def _coerce(key: str, raw: Any, default: Any) -> Any:
    if raw is None or not isinstance(raw, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low in {"1", "true", "yes", "on"}:
                return True
            if low in {"0", "false", "no", "off"}:
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(p) for p in parts)
            if default and isinstance(default[0], float):
                return tuple(float(p) for p in parts)
            return tuple(parts)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw


@dataclass(frozen=True)
class RunConfig:
    """Merged configuration for one command."""

    command: str
    values: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0
    deterministic: bool = False

    def __getattr__(self, name: str) -> Any:
        values = object.__getattribute__(self, "values")
        if name in values:
            return values[name]
        raise AttributeError(name)

    def get(self, key: str, default: Any = None) -> Any:
        return self.values.get(normalize_key(key), default)


def build_run_config(
    command: str,
    defaults: Mapping[str, Any],
    flags: Mapping[str, Any],
    config_path: Optional[str] = None,
    use_user_config: bool = True,
) -> RunConfig:
    """Merge the sources; keys outside ``defaults`` are rejected."""
    allowed = {normalize_key(k): v for k, v in defaults.items()}
    merged: Dict[str, Any] = dict(allowed)

    layers = []
    if use_user_config:
        layers.append(("user config", load_user_config()))
    if config_path:
        layers.append((config_path, load_kv_file(config_path)))

    for source, layer in layers:
        for key, raw in layer.items():
            if key not in allowed:
                raise ConfigError(f"{source}: unknown key {key!r} for '{command}'")
            merged[key] = _coerce(key, raw, allowed[key])

    for key, value in flags.items():
        key = normalize_key(key)
        if value is None:
            continue
        if key not in allowed:
            raise ConfigError(f"unknown option {key!r} for '{command}'")
        merged[key] = _coerce(key, value, allowed[key])

    seed = int(merged.get("seed", 0) or 0)
    deterministic = bool(merged.get("deterministic", False)) or settings.deterministic_from_env()
    merged["deterministic"] = deterministic
    return RunConfig(command=command, values=merged, seed=seed, deterministic=deterministic)
