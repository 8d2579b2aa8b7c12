"""Utility module for loading and recording experiment configurations."""

import copy
import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional, Sequence, Union

import yaml

from app.api.schemas import ExperimentConfig

logger = logging.getLogger(__name__)

CONFIG_FILENAME = "config.yaml"
HASH_LENGTH = 12
WORKERS_ENV = "CASCADE_WORKERS"


def apply_override(data: Dict[str, Any], override: str) -> Dict[str, Any]:
    """Apply one ``key.path=value`` override to a config mapping.

    The value is parsed as YAML, so numbers, booleans and lists work.

    Raises:
        ValueError: If the override is malformed or the key path does not exist
    """
    if "=" not in override:
        raise ValueError(f"Override must look like key.path=value, got {override!r}")
    key_path, raw = override.split("=", 1)
    keys = key_path.strip().split(".")
    node: Any = data
    for depth, key in enumerate(keys[:-1]):
        if not isinstance(node, dict) or key not in node:
            raise ValueError(f"Unknown config key: {'.'.join(keys[:depth + 1])}")
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ValueError(f"Unknown config key: {key_path}")
    node[keys[-1]] = yaml.safe_load(raw)
    return data


def build_config(
    data: Dict[str, Any],
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
) -> ExperimentConfig:
    """Validate a raw mapping, apply overrides and CLI flags, validate again."""
    data = copy.deepcopy(data)
    if seed is not None:
        data["seed"] = seed
    if output_dir is not None:
        data["output_dir"] = output_dir
    if overrides:
        # Overrides address the full tree, defaults included.
        if "seed" not in data:
            raise ValueError("Config must set a seed (or pass --seed) before overrides apply")
        data = ExperimentConfig.model_validate(data).model_dump(mode="json")
        for override in overrides:
            apply_override(data, override)
    return ExperimentConfig.model_validate(data)


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Sequence[str] = (),
    seed: Optional[int] = None,
    output_dir: Optional[str] = None,
) -> ExperimentConfig:
    """Load a YAML experiment configuration.

    Args:
        path: YAML file; None starts from defaults (a seed must then be given)
        overrides: ``key.path=value`` patches
        seed: Replaces the configured seed
        output_dir: Replaces the configured output directory

    Returns:
        Validated ExperimentConfig

    Raises:
        ValueError: If the file is malformed or the configuration is invalid
    """
    data: Dict[str, Any] = {}
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ValueError(f"Malformed config file {path}: {e}") from e
        if loaded is not None and not isinstance(loaded, dict):
            raise ValueError(f"Config file {path} must hold a mapping")
        data = loaded or {}
    config = build_config(data, overrides, seed, output_dir)
    logger.info(f"Loaded configuration (hash {config_hash(config)}, seed {config.seed})")
    return config


def config_hash(config: ExperimentConfig) -> str:
    """First 12 hex digits of SHA-256 over the canonical JSON config, output_dir excluded."""
    canonical = json.dumps(
        config.model_dump(mode="json", exclude={"output_dir"}),
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:HASH_LENGTH]


def write_config(config: ExperimentConfig, directory: Union[str, Path]) -> Path:
    """Write the effective configuration as ``config.yaml``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / CONFIG_FILENAME
    path.write_text(yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False), encoding="utf-8")
    return path


def resolve_workers(config: ExperimentConfig) -> int:
    """Configured worker count, else CASCADE_WORKERS, else 1."""
    if config.workers is not None:
        return config.workers
    raw = os.getenv(WORKERS_ENV)
    if raw is None:
        return 1
    try:
        workers = int(raw)
    except ValueError as e:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from e
    if workers < 1:
        raise ValueError(f"{WORKERS_ENV} must be >= 1, got {workers}")
    return workers
