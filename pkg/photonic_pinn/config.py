"""
Run Configuration
Strict JSON loading of run configs into frozen dataclasses, and environment
defaults read from .env
"""

import dataclasses
import json
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Optional

from dotenv import load_dotenv

from .baseline_bp import OffchipConfig
from .cost_model import ACCOUNTING_MODES, DeviceConstants
from .errors import ConfigError
from .zo_trainer import TrainConfig

load_dotenv()

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Settings:
    """Process-level defaults; command-line flags take precedence"""

    threads: int = 1
    out_dir: str = "runs"
    log_level: str = "INFO"

    @classmethod
    def from_env(cls) -> "Settings":
        try:
            threads = int(os.getenv("PHOTONIC_PINN_THREADS", 1))
        except ValueError:
            raise ConfigError("PHOTONIC_PINN_THREADS must be an integer")
        return cls(
            threads=threads,
            out_dir=os.getenv("PHOTONIC_PINN_OUT_DIR", "runs"),
            log_level=os.getenv("PHOTONIC_PINN_LOG_LEVEL", "INFO").upper(),
        )


@dataclass(frozen=True)
class BaselineConfig:
    """Off-chip dense baseline run and its mapping study"""

    hidden: int = 32
    offchip: OffchipConfig = field(default_factory=OffchipConfig)
    n_noise_seeds: int = 10

    def __post_init__(self):
        if self.hidden < 1 or self.n_noise_seeds < 0:
            raise ValueError("hidden must be >= 1 and n_noise_seeds >= 0")


@dataclass(frozen=True)
class RunConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    accounting: str = "true"
    out_dir: Optional[str] = None
    checkpoint_every: int = 0
    device: DeviceConstants = field(default_factory=DeviceConstants)
    baseline: Optional[BaselineConfig] = None

    def __post_init__(self):
        if self.accounting not in ACCOUNTING_MODES:
            raise ValueError(f"accounting must be one of {ACCOUNTING_MODES}, got {self.accounting!r}")
        if self.checkpoint_every < 0:
            raise ValueError(f"checkpoint_every must be >= 0, got {self.checkpoint_every}")

    def to_dict(self) -> dict:
        return _to_plain(self)


# =========================================
# ========= STRICT LOADER =================
# =========================================

def _to_plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (tuple, list)):
        return [_to_plain(v) for v in value]
    return value


def _type_name(tp) -> str:
    return getattr(tp, "__name__", str(tp))


def _coerce(tp, value: Any, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)

    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if value is None:
            if len(inner) == len(args):
                raise ConfigError(f"{path}: null is not allowed")
            return None
        return _coerce(inner[0], value, path)

    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)

    if origin is tuple:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {type(value).__name__}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))

    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    raise ConfigError(f"{path}: unsupported field type {_type_name(tp)}")


def _build(cls, data: Any, path: str):
    where = path or "<root>"
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")

    kwargs = {}
    for name, value in data.items():
        kwargs[name] = _coerce(hints[name], value, f"{path}.{name}" if path else name)
    try:
        return cls(**kwargs)
    except ValueError as e:
        raise ConfigError(f"{where}: {e}") from e


def parse_config(data: dict) -> RunConfig:
    return _build(RunConfig, data, "")


def load_config(path: str) -> RunConfig:
    """
    Read and validate a run config

    Raises:
        ConfigError: unreadable file, JSON syntax error (with line/column),
            unknown key, wrong type or out-of-range value (with field path)
    """
    try:
        with open(path, "r") as f:
            text = f.read()
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    try:
        data = json.loads(text)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: line {e.lineno}, column {e.colno}: {e.msg}") from e
    config = parse_config(data)
    logger.info(f"Loaded config from: {path}")
    return config


def save_config(config: RunConfig, path: str):
    with open(path, "w") as f:
        json.dump(config.to_dict(), f, indent=2)
