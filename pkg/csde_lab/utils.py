"""
Utility functions for the CSDE laboratory.

Config loading, JSON helpers, console headers and the counter-based random
streams shared by every sampler.
"""

import copy
import json
import os
from pathlib import Path
from typing import Any, Dict, Iterable, Optional

import numpy as np
import yaml
from dotenv import load_dotenv

from csde_lab.errors import ConfigError

# Load environment variables (CSDE_LAB_THREADS, CSDE_LAB_CHUNK_SIZE)
load_dotenv()

DEFAULT_CONFIG_PATH = Path(__file__).with_name("config.yaml")

# Stream purposes: one independent Philox stream per (seed, path_id, purpose)
STREAM_DEVELOPMENT = 0
STREAM_ENDPOINT = 1
STREAM_TARGET = 2
STREAM_EXIT = 3
STREAM_PERMUTATION = 4
STREAM_SAMPLING = 5


def _merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Recursive dict merge; values of ``override`` win, nested dicts are merged."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config(config_path: Optional[str] = None) -> Dict[str, Any]:
    """
    Load an experiment config from YAML (or JSON) and merge it over the defaults.

    Args:
        config_path: Path to the experiment file; None returns the packaged defaults

    Returns:
        Dictionary with the merged experiment settings

    Raises:
        ConfigError: If the file is missing or is not a mapping
    """
    with open(DEFAULT_CONFIG_PATH, "r") as f:
        defaults = yaml.safe_load(f) or {}

    if config_path is None:
        return defaults

    path = Path(config_path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, "r") as f:
            user = yaml.safe_load(f)
    except yaml.YAMLError as exc:
        raise ConfigError(f"Could not parse {path}: {exc}") from exc
    if user is None:
        user = {}
    if not isinstance(user, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")

    # A different model kind must not inherit the default start point
    if "model" in user and "start" not in user:
        defaults.pop("start", None)
    return _merge(defaults, user)


def worker_count(config: Optional[Dict[str, Any]] = None) -> int:
    """Thread cap: CSDE_LAB_THREADS if set, else config batch.threads, else 1."""
    env = os.getenv("CSDE_LAB_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"CSDE_LAB_THREADS must be an integer, got: {env}")
    threads = ((config or {}).get("batch") or {}).get("threads", 1)
    return max(1, int(threads))


def chunk_size(config: Optional[Dict[str, Any]] = None) -> int:
    """Paths per batch: CSDE_LAB_CHUNK_SIZE if set, else config batch.chunk_size."""
    env = os.getenv("CSDE_LAB_CHUNK_SIZE")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"CSDE_LAB_CHUNK_SIZE must be an integer, got: {env}")
    size = ((config or {}).get("batch") or {}).get("chunk_size", 2000)
    return max(1, int(size))


def path_stream(seed: int, path_id: int, purpose: int = STREAM_DEVELOPMENT) -> np.random.Generator:
    """
    Counter-based random stream for one path.

    The stream depends only on (seed, path_id, purpose), so a path's draws are
    the same whatever chunk or thread it is simulated in.
    """
    sequence = np.random.SeedSequence([int(seed), int(path_id), int(purpose)])
    return np.random.Generator(np.random.Philox(sequence))


def path_streams(seed: int, path_ids: Iterable[int], purpose: int = STREAM_DEVELOPMENT):
    return [path_stream(seed, pid, purpose) for pid in path_ids]


def save_json(data: Dict[Any, Any], file_path: Path):
    """Save dictionary to JSON file."""
    with open(file_path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)


def load_json(file_path: Path) -> Dict[Any, Any]:
    """Load JSON file to dictionary."""
    with open(file_path, "r") as f:
        return json.load(f)


def print_section_header(title: str, width: int = 70):
    """Print formatted section header."""
    print("\n" + "=" * width)
    print(title.center(width))
    print("=" * width)


def ensure_directories(output_dir: Path) -> Path:
    """Create the output directory if it doesn't exist."""
    output_dir = Path(output_dir)
    output_dir.mkdir(parents=True, exist_ok=True)
    return output_dir
