#!/usr/bin/env python3
"""
Configuration Management Module

This module handles all configuration for the affordance engine. It has two
layers:

1. Process settings (Settings):
   Loaded from environment variables (and a .env file via python-dotenv)
   when the module is imported.
   - LOG_LEVEL: Logging verbosity level
   - SCORING_WORKERS: Threads used to score the candidates of a group
   - DEFAULT_SEED: Seed used when neither flag nor config file gives one
   - OUTPUT_DIR: Default directory for run artifacts

2. Run configuration (RunConfig):
   A flat key=value file (same syntax as .env) describing one training,
   scoring or ablation run. Values are resolved with the precedence
   CLI flag > config file > default, then validated as a whole.

   GRPO keys:        group_size, clip_epsilon, kl_beta, learning_rate,
                     steps, seed, temperature, weight_decay, optimizer
   Environment keys: difficulty, queries_per_step, train_pool_size,
                     eval_pool_size, max_answer_entries, include_corrupted
   Reward keys:      iou_threshold, l1_threshold, similarity_threshold,
                     weight_<component>, enabled

Example:
    from src.config import settings, load_run_config

    run = load_run_config("configs/easy.env", overrides={"seed": "11"})
    print(run.group_size, run.enabled)
    for line in run.to_lines():
        print(line)
"""

import os
import logging
from dataclasses import dataclass, field, fields
from typing import Dict, FrozenSet, List, Mapping, Optional

from dotenv import load_dotenv, dotenv_values

from .errors import ConfigurationError

# Load environment variables
load_dotenv()

# Setup module logger
logger = logging.getLogger(__name__)

REWARD_COMPONENTS = (
    "format_think",
    "format_rethink",
    "format_answer",
    "iou",
    "l1",
    "box_num",
    "recognition",
)

DIFFICULTIES = ("easy", "hard")
OPTIMIZERS = ("sgd", "adamw")


class Settings:
    """
    Process-wide settings read from the environment.

    Run-specific values (seeds, thresholds, learning rates) do not live
    here; they belong to RunConfig so that a run can be reproduced from its
    config snapshot alone.
    """

    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO").upper()

    SCORING_WORKERS: int = int(os.getenv("SCORING_WORKERS", "1"))

    DEFAULT_SEED: int = int(os.getenv("DEFAULT_SEED", "7"))

    OUTPUT_DIR: str = os.getenv("OUTPUT_DIR", "runs")

    @classmethod
    def validate(cls) -> None:
        """
        Validate configuration settings.

        Raises:
            ConfigurationError: If any setting is invalid
        """
        errors = []

        valid_log_levels = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
        if cls.LOG_LEVEL not in valid_log_levels:
            errors.append(
                f"Invalid LOG_LEVEL: '{cls.LOG_LEVEL}'. "
                f"Valid options: {valid_log_levels}"
            )

        if cls.SCORING_WORKERS < 1:
            errors.append("SCORING_WORKERS must be at least 1")

        if cls.DEFAULT_SEED < 0:
            errors.append("DEFAULT_SEED must be non-negative")

        if errors:
            error_msg = "Configuration validation failed:\n" + "\n".join(f"  - {e}" for e in errors)
            raise ConfigurationError(error_msg)

    @classmethod
    def to_dict(cls) -> Dict[str, object]:
        return {
            "log_level": cls.LOG_LEVEL,
            "scoring_workers": cls.SCORING_WORKERS,
            "default_seed": cls.DEFAULT_SEED,
            "output_dir": cls.OUTPUT_DIR,
        }


# Create settings instance
settings = Settings()

# Validate configuration on import
try:
    settings.validate()
    logger.debug("Configuration validated successfully")
except ConfigurationError as e:
    logger.error(f"Configuration error: {e}")
    raise


# ============================================================================
# RUN CONFIGURATION
# ============================================================================

@dataclass(frozen=True)
class RunConfig:
    """
    Fully resolved configuration of one run.

    Defaults follow the main-text hyperparameters where they transfer to
    the toy environment (group size 8, KL coefficient 5e-3, clip 0.2,
    temperature 1). The learning rate is calibrated for the toy softmax
    policy, whose parameters are a handful of feature weights.
    """

    # GRPO
    group_size: int = 8
    clip_epsilon: float = 0.2
    kl_beta: float = 5e-3
    learning_rate: float = 0.5
    steps: int = 2000
    seed: int = Settings.DEFAULT_SEED
    temperature: float = 1.0
    weight_decay: float = 0.0
    optimizer: str = "sgd"

    # Toy environment
    difficulty: str = "easy"
    queries_per_step: int = 4
    train_pool_size: int = 64
    eval_pool_size: int = 32
    max_answer_entries: int = 2
    include_corrupted: bool = True

    # Reward engine
    iou_threshold: float = 0.5
    l1_threshold: float = 10.0
    similarity_threshold: float = 0.8
    weights: Mapping[str, float] = field(
        default_factory=lambda: {c: 1.0 for c in REWARD_COMPONENTS}
    )
    enabled: FrozenSet[str] = frozenset(REWARD_COMPONENTS)

    def validate(self) -> None:
        """
        Validate every field and report all problems at once.

        Raises:
            ConfigurationError: If any value is out of range
        """
        errors = []

        if self.group_size < 2:
            errors.append("group_size must be at least 2")
        if not 0.0 < self.clip_epsilon < 1.0:
            errors.append("clip_epsilon must be in (0, 1)")
        if self.kl_beta < 0.0:
            errors.append("kl_beta must be non-negative")
        if self.learning_rate <= 0.0:
            errors.append("learning_rate must be positive")
        if self.steps < 0:
            errors.append("steps must be non-negative")
        if self.seed < 0:
            errors.append("seed must be non-negative")
        if self.temperature <= 0.0:
            errors.append("temperature must be positive")
        if self.weight_decay < 0.0:
            errors.append("weight_decay must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            errors.append(f"Invalid optimizer: '{self.optimizer}'. Valid options: {OPTIMIZERS}")

        if self.difficulty not in DIFFICULTIES:
            errors.append(f"Invalid difficulty: '{self.difficulty}'. Valid options: {DIFFICULTIES}")
        if self.queries_per_step < 1:
            errors.append("queries_per_step must be at least 1")
        if self.train_pool_size < 1:
            errors.append("train_pool_size must be at least 1")
        if self.eval_pool_size < 1:
            errors.append("eval_pool_size must be at least 1")
        if self.max_answer_entries < 1:
            errors.append("max_answer_entries must be at least 1")

        if not 0.0 < self.iou_threshold < 1.0:
            errors.append("iou_threshold must be in (0, 1)")
        if self.l1_threshold <= 0.0:
            errors.append("l1_threshold must be positive")
        if not 0.0 < self.similarity_threshold < 1.0:
            errors.append("similarity_threshold must be in (0, 1)")
        for name, weight in self.weights.items():
            if name not in REWARD_COMPONENTS:
                errors.append(f"Unknown reward component in weights: '{name}'")
            elif weight < 0.0:
                errors.append(f"weight_{name} must be non-negative")
        unknown = set(self.enabled) - set(REWARD_COMPONENTS)
        if unknown:
            errors.append(f"Unknown reward components in enabled: {sorted(unknown)}")

        if errors:
            error_msg = "Run configuration invalid:\n" + "\n".join(f"  - {e}" for e in errors)
            raise ConfigurationError(error_msg)

    def to_lines(self) -> List[str]:
        """Stable key=value snapshot, one line per key, sorted by key."""
        values = {}
        for f in fields(self):
            if f.name == "weights":
                for component in REWARD_COMPONENTS:
                    values[f"weight_{component}"] = _format_value(self.weights.get(component, 1.0))
            elif f.name == "enabled":
                values["enabled"] = ",".join(c for c in REWARD_COMPONENTS if c in self.enabled)
            else:
                values[f.name] = _format_value(getattr(self, f.name))
        return [f"{key}={values[key]}" for key in sorted(values)]


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


_INT_KEYS = {
    "group_size", "steps", "seed", "queries_per_step", "train_pool_size",
    "eval_pool_size", "max_answer_entries",
}
_FLOAT_KEYS = {
    "clip_epsilon", "kl_beta", "learning_rate", "temperature", "weight_decay",
    "iou_threshold", "l1_threshold", "similarity_threshold",
}
_STR_KEYS = {"optimizer", "difficulty"}
_BOOL_KEYS = {"include_corrupted"}


def _parse_bool(raw: str) -> Optional[bool]:
    return {
        "true": True, "1": True, "yes": True,
        "false": False, "0": False, "no": False,
    }.get(raw.strip().lower())


def build_run_config(values: Mapping[str, Optional[str]]) -> RunConfig:
    """
    Turn raw key=value strings into a validated RunConfig.

    Args:
        values: Raw string values keyed by config key

    Returns:
        RunConfig: Validated configuration

    Raises:
        ConfigurationError: On unknown keys, unparsable or invalid values
    """
    errors = []
    kwargs = {}
    weights = {c: 1.0 for c in REWARD_COMPONENTS}

    for key, raw in values.items():
        key = key.strip().lower()
        raw = "" if raw is None else str(raw).strip()
        try:
            if key in _INT_KEYS:
                kwargs[key] = int(raw)
            elif key in _FLOAT_KEYS:
                kwargs[key] = float(raw)
            elif key in _STR_KEYS:
                kwargs[key] = raw.lower()
            elif key in _BOOL_KEYS:
                parsed = _parse_bool(raw)
                if parsed is None:
                    errors.append(f"{key} must be a boolean, got '{raw}'")
                else:
                    kwargs[key] = parsed
            elif key.startswith("weight_"):
                component = key[len("weight_"):]
                if component not in REWARD_COMPONENTS:
                    errors.append(f"Unknown reward component: '{component}'")
                else:
                    weights[component] = float(raw)
            elif key == "enabled":
                kwargs["enabled"] = frozenset(p.strip() for p in raw.split(",") if p.strip())
            else:
                errors.append(f"Unknown config key: '{key}'")
        except ValueError:
            errors.append(f"Invalid value for {key}: '{raw}'")

    if errors:
        raise ConfigurationError(
            "Run configuration invalid:\n" + "\n".join(f"  - {e}" for e in errors)
        )

    run = RunConfig(weights=weights, **kwargs)
    run.validate()
    return run


def load_run_config(
    path: Optional[str] = None,
    overrides: Optional[Mapping[str, Optional[str]]] = None,
) -> RunConfig:
    """
    Load a key=value run config file and apply overrides on top.

    Args:
        path: Optional path to the config file
        overrides: Values that win over the file (CLI flags); None entries
            are ignored

    Returns:
        RunConfig: Resolved and validated configuration

    Raises:
        ConfigurationError: If the file is missing or any value is invalid
    """
    values: Dict[str, Optional[str]] = {}
    if path:
        if not os.path.isfile(path):
            raise ConfigurationError(f"Config file not found: {path}")
        values.update(dotenv_values(path))
        logger.debug(f"Loaded {len(values)} keys from {path}")
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = str(value)
    return build_run_config(values)
