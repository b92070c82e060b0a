"""Runtime constants, agent-home resolution and the config file reader."""

from __future__ import annotations

import os
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

# Context compression
COMPRESS_TOKEN_THRESHOLD = 180_000
NODE_COMPRESS_TOKEN_THRESHOLD = 15_000
COMPRESS_KEEP_FIRST_TURNS = 5
COMPRESS_KEEP_LAST_TURNS = 5

# Tool execution
TOOL_TEXT_LIMIT = 8_192
TOOL_TIMEOUT_SECONDS = 300.0
TERMINAL_TIMEOUT_SECONDS = 60.0
EXEC_CODE_TIMEOUT_SECONDS = 60.0
VERIFY_COMPLETION_TIMEOUT_SECONDS = 120.0
MODEL_TIMEOUT_SECONDS = 300.0
MAX_RETRY = 5
VERIFY_COMPLETION_TURN_THRESHOLD = 4

HOME_ENV_VAR = "AUTOSKILL_HOME"
DEFAULT_HOME = Path("~/.autoskill")
CONFIG_FILE = "config.toml"

HOME_SUBDIRS = ("skills", "memory/long_term_memory", "sessions")


def resolve_home(explicit: str | os.PathLike | None = None) -> Path:
    """Pick the agent home: explicit argument, then $AUTOSKILL_HOME, then ~/.autoskill."""
    if explicit:
        return Path(explicit).expanduser()
    env = os.environ.get(HOME_ENV_VAR)
    if env:
        return Path(env).expanduser()
    return DEFAULT_HOME.expanduser()


def init_home(home: Path) -> Path:
    home = Path(home)
    for sub in HOME_SUBDIRS:
        (home / sub).mkdir(parents=True, exist_ok=True)
    return home


def is_initialized(home: Path) -> bool:
    return all((Path(home) / sub).is_dir() for sub in HOME_SUBDIRS)


def long_term_memory_path(home: Path) -> Path:
    return Path(home) / "memory" / "long_term_memory" / "memory.md"


@dataclass(frozen=True)
class LoopConfig:
    tool_text_limit: int = TOOL_TEXT_LIMIT
    tool_timeout: float = TOOL_TIMEOUT_SECONDS
    terminal_timeout: float = TERMINAL_TIMEOUT_SECONDS
    exec_code_timeout: float = EXEC_CODE_TIMEOUT_SECONDS
    verify_completion_timeout: float = VERIFY_COMPLETION_TIMEOUT_SECONDS
    model_timeout: float = MODEL_TIMEOUT_SECONDS
    max_retry: int = MAX_RETRY
    verify_completion_turn_threshold: int = VERIFY_COMPLETION_TURN_THRESHOLD
    # guard against a model that never calls final_answer
    turn_limit: int = 200
    refine_max_rounds: int = 3

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value <= 0:
                raise ValueError(f"{f.name} must be positive, got {value!r}")

    def timeout_for(self, timeout_class: str) -> float:
        return {
            "tool": self.tool_timeout,
            "terminal": self.terminal_timeout,
            "exec": self.exec_code_timeout,
            "verify": self.verify_completion_timeout,
            "model": self.model_timeout,
        }[timeout_class]


@dataclass(frozen=True)
class ModelSettings:
    model_id: str = "scripted"
    endpoint: str | None = None
    api_key_env: str = "AUTOSKILL_API_KEY"


@dataclass(frozen=True)
class RuntimeConfig:
    loop: LoopConfig
    model: ModelSettings
    raw: dict


_TIMEOUT_KEYS = {
    "TOOL_TEXT_LIMIT": "tool_text_limit",
    "TOOL_TIMEOUT_SECONDS": "tool_timeout",
    "TERMINAL_TIMEOUT_SECONDS": "terminal_timeout",
    "EXEC_CODE_TIMEOUT_SECONDS": "exec_code_timeout",
    "VERIFY_COMPLETION_TIMEOUT_SECONDS": "verify_completion_timeout",
    "MODEL_TIMEOUT_SECONDS": "model_timeout",
    "MAX_RETRY": "max_retry",
    "VERIFY_COMPLETION_TURN_THRESHOLD": "verify_completion_turn_threshold",
}


def load_config(home: Path) -> RuntimeConfig:
    """Read ``<home>/config.toml`` if present.

    Keys: ``model_id``, ``endpoint``, ``api_key_env`` and any upper-case
    constant name (``TOOL_TIMEOUT_SECONDS = 120``) or its LoopConfig field
    name, which override the defaults.
    """
    path = Path(home) / CONFIG_FILE
    raw: dict[str, Any] = {}
    if path.is_file():
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    overrides = {}
    loop_fields = {f.name for f in fields(LoopConfig)}
    for key, value in raw.items():
        name = _TIMEOUT_KEYS.get(key.upper(), key)
        if name in loop_fields:
            overrides[name] = value
    model = ModelSettings(
        model_id=str(raw.get("model_id", ModelSettings.model_id)),
        endpoint=raw.get("endpoint"),
        api_key_env=str(raw.get("api_key_env", ModelSettings.api_key_env)),
    )
    return RuntimeConfig(loop=replace(LoopConfig(), **overrides), model=model, raw=raw)
