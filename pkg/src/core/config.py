"""
Configuration management for the kd-lic toolkit.
Handles environment variables, run directories, the quality/lambda table and logging setup.
"""
import os
import sys
from pathlib import Path
from typing import Dict, Tuple

from dotenv import load_dotenv
from loguru import logger

# Load environment variables from .env file
load_dotenv()

# Base project paths
BASE_DIR = Path(__file__).parent.parent
PROJECT_DIR = BASE_DIR.parent

# Rate-distortion lambda used by the public model zoo for each "quality" argument (MSE models)
QUALITY_TO_LAMBDA: Dict[int, float] = {
    1: 0.0018,
    2: 0.0035,
    3: 0.0067,
    4: 0.0130,
    5: 0.0250,
    6: 0.0483,
    7: 0.0932,
    8: 0.1800,
}

# (channels_n, latent_m) of the zoo models; qualities above 5 use a wider latent
QUALITY_TO_ARCHITECTURE: Dict[int, Tuple[int, int]] = {
    q: ((128, 192) if q <= 5 else (192, 320)) for q in QUALITY_TO_LAMBDA
}


def _env_bool(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


class Settings:
    """Toolkit settings loaded from environment variables."""

    def __init__(self):
        # Compute settings
        self.DEVICE = os.getenv("KDLIC_DEVICE", "auto")
        self.DETERMINISTIC = _env_bool("KDLIC_DETERMINISTIC", "false")
        self.NUM_WORKERS = int(os.getenv("KDLIC_NUM_WORKERS", "0"))

        # Logging settings
        self.LOG_LEVEL = os.getenv("KDLIC_LOG_LEVEL", "INFO")
        self.LOG_DIR = Path(os.getenv("KDLIC_LOG_DIR", PROJECT_DIR / "logs"))
        self.PROGRESS = _env_bool("KDLIC_PROGRESS", "true")

        # Storage settings
        self.DATA_DIR = Path(os.getenv("KDLIC_DATA_DIR", PROJECT_DIR / "data"))
        self.RUNS_DIR = Path(os.getenv("KDLIC_RUNS_DIR", PROJECT_DIR / "runs"))
        self.EVAL_ROOT = Path(os.getenv("KDLIC_EVAL_ROOT", self.DATA_DIR / "kodak"))

        # Profiling settings
        self.PROXY_POWER_WATTS = float(os.getenv("KDLIC_PROXY_POWER_WATTS", "250"))

        # Provenance tag written into result files; resolved from git when empty
        self.COMMIT_TAG = os.getenv("KDLIC_COMMIT_TAG", "")


# Create a global settings instance
settings = Settings()


def rd_lambda_for_quality(quality: int) -> float:
    """
    Map a zoo quality argument to its rate-distortion lambda.

    Args:
        quality: Integer quality in 1..8

    Returns:
        The lambda used inside the RD term

    Raises:
        ConfigurationError: If quality is outside 1..8
    """
    from src.core.errors import ConfigurationError

    if quality not in QUALITY_TO_LAMBDA:
        raise ConfigurationError(
            f"quality must be in range 1-8, got {quality}", field="rd_quality"
        )
    return QUALITY_TO_LAMBDA[quality]


def resolve_device(name: str = None) -> str:
    """Resolve the configured device name ("auto" picks cuda when available)."""
    import torch

    name = name or settings.DEVICE
    if name == "auto":
        return "cuda" if torch.cuda.is_available() else "cpu"
    return name


_logging_configured = False


def configure_logging(level: str = None, log_file: bool = True) -> None:
    """Install the stderr sink and the rotating file sink once per process."""
    global _logging_configured
    if _logging_configured:
        return

    logger.remove()
    logger.add(sys.stderr, level=level or settings.LOG_LEVEL)
    if log_file:
        settings.LOG_DIR.mkdir(parents=True, exist_ok=True)
        logger.add(
            settings.LOG_DIR / "kdlic.log",
            level="DEBUG",
            rotation="10 MB",
            retention=5,
        )
    _logging_configured = True
    logger.debug(f"Logging configured (level={level or settings.LOG_LEVEL})")
