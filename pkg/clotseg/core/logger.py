from __future__ import annotations

import logging
import logging.config
import os
from pathlib import Path
from typing import Optional, Union

import yaml
from tqdm import tqdm

CONFIG_PATH = Path(__file__).resolve().parents[2] / "configs" / "logging.yaml"
PACKAGE_LOGGER = "clotseg"
FORMAT = "%(asctime)s | %(levelname)s | %(name)s | %(message)s"

_configured = False


class TqdmHandler(logging.StreamHandler):
    """Writes records through ``tqdm.write`` so epoch lines do not tear the progress bar."""

    def emit(self, record: logging.LogRecord) -> None:
        try:
            tqdm.write(self.format(record), file=self.stream)
        except Exception:  # noqa: BLE001
            self.handleError(record)


def configure_logging(config_path: Optional[Path] = None, *, force: bool = False) -> None:
    """Load the dictConfig once. ``CLOTSEG_LOG_CONFIG`` points at an alternative YAML file."""
    global _configured  # noqa: PLW0603
    if _configured and not force:
        return
    env_path = os.getenv("CLOTSEG_LOG_CONFIG")
    path = config_path or (Path(env_path) if env_path else CONFIG_PATH)
    if path.exists():
        with path.open("r", encoding="utf-8") as fh:
            logging.config.dictConfig(yaml.safe_load(fh))
    else:
        logging.basicConfig(level=logging.INFO, format=FORMAT)
    _configured = True


def set_level(level: Union[int, str]) -> None:
    """Change the package logger and its handlers, e.g. from ``--log-level DEBUG``."""
    configure_logging()
    if isinstance(level, str):
        resolved = logging.getLevelName(level.upper())
        if not isinstance(resolved, int):
            raise ValueError(f"Unknown log level {level!r}")
        level = resolved
    package = logging.getLogger(PACKAGE_LOGGER)
    package.setLevel(level)
    for handler in package.handlers:
        handler.setLevel(level)


def get_logger(name: str) -> logging.Logger:
    configure_logging()
    return logging.getLogger(name)


__all__ = ["CONFIG_PATH", "TqdmHandler", "configure_logging", "get_logger", "set_level"]
