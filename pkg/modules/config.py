"""
Configuration module for serialroc
Reads runtime settings from the environment (optionally a .env file)
"""

import os
import logging
from dataclasses import dataclass
from typing import Dict, Any

logger = logging.getLogger(__name__)


class ConfigError(Exception):
    """Custom exception for configuration errors"""
    pass


def _env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or raw.strip() == '':
        return default
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{name} must be an integer, got {raw!r}")


@dataclass(frozen=True)
class Settings:
    """Process-wide settings"""
    log_level: str = 'INFO'
    log_dir: str = 'logs'
    workers: int = 1
    min_class_rows: int = 30
    default_seed: int = 0

    @classmethod
    def from_env(cls) -> 'Settings':
        """Build settings from SERIALROC_* environment variables"""
        level = os.getenv('SERIALROC_LOG_LEVEL', 'INFO').upper()
        if level not in ('DEBUG', 'INFO', 'WARNING', 'ERROR', 'CRITICAL'):
            raise ConfigError(f"SERIALROC_LOG_LEVEL must be a logging level name, got {level!r}")

        workers = _env_int('SERIALROC_WORKERS', 1)
        if workers < 1:
            raise ConfigError(f"SERIALROC_WORKERS must be >= 1, got {workers}")

        min_rows = _env_int('SERIALROC_MIN_CLASS_ROWS', 30)
        if min_rows < 1:
            raise ConfigError(f"SERIALROC_MIN_CLASS_ROWS must be >= 1, got {min_rows}")

        return cls(
            log_level=level,
            log_dir=os.getenv('SERIALROC_LOG_DIR', 'logs'),
            workers=workers,
            min_class_rows=min_rows,
            default_seed=_env_int('SERIALROC_SEED', 0),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'log_level': self.log_level,
            'log_dir': self.log_dir,
            'workers': self.workers,
            'min_class_rows': self.min_class_rows,
            'default_seed': self.default_seed,
        }
