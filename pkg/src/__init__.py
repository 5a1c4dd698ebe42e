#!/usr/bin/env python3
"""
Affordance Engine Package

Rule-based rewards, GRPO training and evaluation for reasoning-driven
affordance grounding, verified at desk scale with a synthetic environment
and an analytic softmax policy.

Package Structure:
- main.py: Command line entry point (score, train-toy, eval, convert, ablate)
- config.py: Process settings and key=value run configuration
- logger_setup.py: Centralized logging configuration
- errors.py: Shared exception root
- geometry.py: Boxes, points, masks and PGM mask files
- response_parser.py: <think>/<rethink>/<answer> parsing and rendering
- reward_engine.py: Format, perception and recognition rewards
- grpo.py: Group-relative advantages, clipped surrogate, KL penalty
- toy_env.py: Synthetic scenes and the enumerated softmax policy
- trainer.py: Training and ablation pipelines for the toy environment
- metrics.py: gIoU, cIoU, P@50, P@50:95, KLD, SIM, NSS
- dataset_io.py: Grounding records as JSONL

Usage:
    from src.reward_engine import RewardConfig, total_reward
    from src.toy_env import build_toy_lexicon

    breakdown = total_reward(text, record, build_toy_lexicon(), RewardConfig())
"""

__version__ = "1.0.0"
__description__ = "Affordance grounding rewards, GRPO training and evaluation"

__all__ = [
    "main",
    "config",
    "logger_setup",
    "errors",
    "geometry",
    "response_parser",
    "reward_engine",
    "grpo",
    "toy_env",
    "trainer",
    "metrics",
    "dataset_io",
]
