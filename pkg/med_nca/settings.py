"""Runtime settings: site config, environment and key=value run files.

Site-wide defaults live in an optional ``config.py`` at the repository root
(copy ``config_example.py``). Anything it does not define falls back to the
built-ins below.
"""

import logging
import os
import sys
from pathlib import Path

# Add repository root to path for config import
sys.path.insert(0, os.path.dirname(os.path.dirname(__file__)))

from med_nca.errors import ConfigError

logger = logging.getLogger(__name__)

try:
    from config import SWEEP_GRIDS
except ImportError:
    SWEEP_GRIDS = {
        "scale": [0.5, 0.8, 1.0, 1.2, 1.5, 2.0],
        "shape": [0.5, 0.75, 1.0, 1.25, 1.5, 2.0],
        "translate": [0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
        "ghosting": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        "anisotropy": [1, 2, 4, 6, 8],
        "bias_field": [0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
    }

try:
    from config import DATASET_SPLITS
except ImportError:
    DATASET_SPLITS = {"train": 0.8, "val": 0.1, "test": 0.1}

try:
    from config import GHOSTING_NUM_GHOSTS
except ImportError:
    GHOSTING_NUM_GHOSTS = 4


def worker_count() -> int:
    """Thread cap from MEDNCA_THREADS, defaulting to the CPU count."""
    cpus = os.cpu_count() or 1
    raw = os.getenv("MEDNCA_THREADS", "")
    if not raw:
        return cpus
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"MEDNCA_THREADS must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigError(f"MEDNCA_THREADS must be >= 1, got {value}")
    if value > cpus:
        logger.warning(f"MEDNCA_THREADS={value} exceeds {cpus} CPUs")
    return value


def log_level(override: str | None = None) -> int:
    name = (override or os.getenv("MEDNCA_LOG_LEVEL", "INFO")).upper()
    level = logging.getLevelName(name)
    if not isinstance(level, int):
        raise ConfigError(f"Unknown log level: {name}")
    return level


def _coerce(raw: str, default: object) -> object:
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse a line-oriented ``key=value`` file (``#`` comments, blank lines ignored)."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    values: dict[str, str] = {}
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{number}: expected key=value, got {line!r}")
        values[key.strip()] = value.strip()
    return values


def merge_settings(defaults: dict[str, object], *layers: dict[str, object | None]) -> dict[str, object]:
    """Overlay layers on ``defaults`` (later wins, ``None`` skipped), coercing strings.

    Keys not present in ``defaults`` are an error.
    """
    merged = dict(defaults)
    for layer in layers:
        for key, value in layer.items():
            if value is None:
                continue
            if key not in defaults:
                raise ConfigError(f"Unknown config key: {key}. Known keys: {sorted(defaults)}")
            if isinstance(value, str) and not isinstance(defaults[key], str):
                try:
                    value = _coerce(value, defaults[key])
                except ValueError as e:
                    raise ConfigError(f"bad value for {key}: {e}") from e
            merged[key] = value
    return merged
