"""
Environment configuration for kms-hodge runs
"""

import logging
import os
from typing import Tuple

from dotenv import load_dotenv

logger = logging.getLogger(__name__)


class EnvConfig:
    """Environment configuration manager"""

    _loaded = False

    @classmethod
    def load_env(cls, env_path: str = ".env") -> None:
        """Load environment variables from .env file"""
        if not cls._loaded:
            load_dotenv(env_path)
            cls._loaded = True

    @classmethod
    def get_threads(cls) -> int:
        """Worker threads for independent scan members; 0 means one per CPU"""
        cls.load_env()
        threads = int(os.getenv("KMS_HODGE_THREADS", "0"))
        if threads <= 0:
            return os.cpu_count() or 1
        return threads

    @classmethod
    def get_seed(cls) -> int:
        cls.load_env()
        return int(os.getenv("KMS_HODGE_SEED", "0"))

    @classmethod
    def get_tolerance(cls) -> float:
        """Self-adjointness tolerance for the spectral calculus"""
        cls.load_env()
        return float(os.getenv("KMS_HODGE_TOL", "1e-10"))

    @classmethod
    def get_default_output_format(cls) -> str:
        cls.load_env()
        return os.getenv("KMS_HODGE_OUTPUT_FORMAT", "json")

    @classmethod
    def get_log_level(cls) -> str:
        cls.load_env()
        return os.getenv("KMS_HODGE_LOG_LEVEL", "INFO").upper()

    @classmethod
    def get_grid(cls) -> Tuple[int, int]:
        """Default grid as (n_rad, n_ang), written NxM in the environment"""
        cls.load_env()
        return parse_grid(os.getenv("KMS_HODGE_GRID", "64x64"))

    @classmethod
    def validate_config(cls) -> dict:
        """Validate configuration and return status"""
        cls.load_env()

        status = {
            "threads": cls.get_threads(),
            "seed": cls.get_seed(),
            "tolerance": cls.get_tolerance(),
            "output_format": cls.get_default_output_format(),
            "log_level": cls.get_log_level(),
            "grid": "x".join(str(n) for n in cls.get_grid()),
        }

        if status["output_format"] not in ("text", "json", "csv"):
            logger.warning(f"Unknown KMS_HODGE_OUTPUT_FORMAT '{status['output_format']}', using json")
            status["output_format"] = "json"

        return status


def parse_grid(value: str) -> Tuple[int, int]:
    """Parse "NxM" into (N, M)"""
    parts = value.lower().replace(" ", "").split("x")
    if len(parts) != 2:
        raise ValueError(f"Grid must be written NxM, got '{value}'")
    try:
        n_rad, n_ang = int(parts[0]), int(parts[1])
    except ValueError:
        raise ValueError(f"Grid must be written NxM with integer sizes, got '{value}'")
    if n_rad < 8 or n_ang < 8:
        raise ValueError(f"Grid sizes must be at least 8, got '{value}'")
    return n_rad, n_ang
