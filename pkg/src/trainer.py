#!/usr/bin/env python3
"""
Toy Training Pipeline

Orchestrates GRPO training of the toy softmax policy with the real
response parser and reward engine in the loop:

1. Scene pools: a fixed training pool and a separate evaluation pool,
   drawn from independent seed streams
2. Reward tables: every candidate of every scene is scored once with
   total_reward and memoised
3. GRPO steps: groups are sampled for a few training scenes per step
4. Tracking: per-step stats plus the analytic expected reward on both
   pools

Also runs the reward-toggle ablation on hard multi-target scenes.

Usage:
    trainer = ToyTrainer(load_run_config("configs/easy.env"))
    result = trainer.run()
    print(result.final_reward, result.max_reward)
"""

import math
from concurrent.futures import Executor, ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import dataclass, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig, settings
from .errors import ConfigurationError
from .grpo import GrpoConfig, StepStats, grpo_step, make_updater
from .logger_setup import get_logger
from .reward_engine import EmbeddingLexicon, RewardBreakdown, RewardConfig, score_responses
from .toy_env import (
    CandidateSet,
    ToyPolicy,
    build_toy_lexicon,
    count_accuracy,
    expected_reward,
    generate_scenes,
    max_reward,
)

logger = get_logger("trainer", settings.LOG_LEVEL)

# seed stream ids under the run seed
_TRAIN_STREAM, _EVAL_STREAM, _SAMPLE_STREAM = 0, 1, 2

ABLATION_VARIANTS: Dict[str, Tuple[str, ...]] = {
    "full": (),
    "no_rethink": ("format_rethink",),
    "no_recognition": ("recognition",),
    "no_box_num": ("box_num",),
}

LOG_EVERY = 100


def reward_config_from_run(run: RunConfig) -> RewardConfig:
    return RewardConfig(
        iou_threshold=run.iou_threshold,
        l1_threshold=run.l1_threshold,
        similarity_threshold=run.similarity_threshold,
        weights=dict(run.weights),
        enabled=run.enabled,
    )


@dataclass
class TrainingResult:
    """History and summary of one training run."""

    history: List[StepStats]
    train_rewards: List[float]
    eval_rewards: List[float]
    theta: np.ndarray
    baseline_reward: float
    max_reward: float
    count_accuracy: float = 0.0

    @property
    def final_reward(self) -> float:
        return self.train_rewards[-1] if self.train_rewards else self.baseline_reward

    @property
    def final_eval_reward(self) -> float:
        return self.eval_rewards[-1] if self.eval_rewards else 0.0

    @staticmethod
    def moving_average(values: Sequence[float], window: int = 50) -> np.ndarray:
        values = np.asarray(values, dtype=np.float64)
        if window <= 0 or len(values) < window:
            return np.array([], dtype=np.float64)
        return np.convolve(values, np.ones(window) / window, mode="valid")

    def is_non_decreasing(self, window: int = 50, start: int = 100, tolerance: float = 1e-9) -> bool:
        """
        Whether the window-step moving average of the training reward after
        `start` never drops by more than `tolerance`.

        Consecutive averages differ by (R[t + window] - R[t]) / window, so a
        tolerance tol admits any R[t + window] - R[t] >= -tol * window.
        """
        smoothed = self.moving_average(self.train_rewards[start:], window)
        return bool(np.all(np.diff(smoothed) >= -tolerance))


class ToyTrainer:
    """
    GRPO training pipeline for the toy environment.

    Owns the policy, the optimizer state and the scene pools; every random
    draw comes from generators seeded by run_config.seed.
    """

    def __init__(
        self,
        run_config: RunConfig,
        lexicon: Optional[EmbeddingLexicon] = None,
        min_targets: int = 1,
    ):
        """Initialize pipeline state."""
        self.run_config = run_config
        self.grpo_config = GrpoConfig.from_run_config(run_config)
        self.reward_config = reward_config_from_run(run_config)
        self.lexicon = lexicon or build_toy_lexicon()
        self.min_targets = min_targets
        self.policy = ToyPolicy.uniform(run_config.temperature)
        self.reference_theta = self.policy.theta.copy()
        self.updater = make_updater(self.grpo_config)
        self.sample_rng = np.random.default_rng([run_config.seed, _SAMPLE_STREAM])
        self.train_pool: List[CandidateSet] = []
        self.eval_pool: List[CandidateSet] = []
        self.train_tables: List[np.ndarray] = []
        self.eval_tables: List[np.ndarray] = []
        self._breakdowns: Dict[int, List[RewardBreakdown]] = {}
        self.workers = settings.SCORING_WORKERS
        self.executor: Optional[Executor] = None
        self.stats = {
            "steps": 0,
            "scored_candidates": 0,
            "degenerate_groups": 0,
            "clamped": 0,
        }

    # ------------------------------------------------------------------
    # setup
    # ------------------------------------------------------------------

    def _build_pool(self, stream: int, size: int) -> List[CandidateSet]:
        rng = np.random.default_rng([self.run_config.seed, stream])
        scenes = generate_scenes(rng, self.run_config.difficulty, size, self.min_targets)
        return [
            CandidateSet.build(s, self.run_config.max_answer_entries, self.run_config.include_corrupted)
            for s in scenes
        ]

    def _score_pool(self, pool: Sequence[CandidateSet]) -> List[np.ndarray]:
        tables = []
        for candidates in pool:
            breakdowns = score_responses(
                candidates.texts, candidates.record, self.lexicon, self.reward_config, executor=self.executor
            )
            self._breakdowns[id(candidates)] = breakdowns
            self.stats["scored_candidates"] += len(breakdowns)
            tables.append(np.array([b.total for b in breakdowns], dtype=np.float64))
        return tables

    def prepare(self) -> None:
        """Build both scene pools and their reward tables."""
        if self.train_pool:
            return
        self.train_pool = self._build_pool(_TRAIN_STREAM, self.run_config.train_pool_size)
        self.eval_pool = self._build_pool(_EVAL_STREAM, self.run_config.eval_pool_size)
        self.train_tables = self._score_pool(self.train_pool)
        self.eval_tables = self._score_pool(self.eval_pool)
        logger.info(
            f"Prepared {len(self.train_pool)} training and {len(self.eval_pool)} evaluation scenes "
            f"({self.run_config.difficulty}, {self.stats['scored_candidates']} candidates scored)"
        )

    def reward_fn(self, candidates: CandidateSet, text: str) -> RewardBreakdown:
        """Memoised reward of a candidate text."""
        return self._breakdowns[id(candidates)][candidates.lookup(text)]

    # ------------------------------------------------------------------
    # training
    # ------------------------------------------------------------------

    def train_step(self, step: int) -> StepStats:
        indices = self.sample_rng.integers(0, len(self.train_pool), size=self.run_config.queries_per_step)
        queries = [(f"train-{int(i)}", self.train_pool[int(i)]) for i in indices]
        stats = grpo_step(
            self.policy,
            queries,
            self.reward_fn,
            self.grpo_config,
            self.sample_rng,
            self.reference_theta,
            updater=self.updater,
            step=step,
            executor=self.executor,
        )
        self.stats["steps"] += 1
        self.stats["degenerate_groups"] += stats.degenerate_groups
        self.stats["clamped"] += stats.clamped
        return stats

    def baseline_reward(self) -> float:
        return expected_reward(self.policy, self.train_pool, self.train_tables, np.zeros_like(self.policy.theta))

    def run(
        self,
        steps: Optional[int] = None,
        on_step: Optional[Callable[[StepStats, float, float], None]] = None,
    ) -> TrainingResult:
        """
        Run the training loop.

        Args:
            steps: Number of GRPO steps (defaults to run_config.steps)
            on_step: Called after every step with (stats, train reward,
                eval reward); used by the CLI to stream JSONL rows

        Returns:
            TrainingResult: Histories and final parameters
        """
        pool = ThreadPoolExecutor(max_workers=self.workers) if self.workers > 1 else nullcontext()
        with pool as executor:
            self.executor = executor
            try:
                return self._run(steps, on_step)
            finally:
                self.executor = None

    def _run(
        self,
        steps: Optional[int],
        on_step: Optional[Callable[[StepStats, float, float], None]],
    ) -> TrainingResult:
        self.prepare()
        steps = self.run_config.steps if steps is None else steps
        baseline = self.baseline_reward()
        best = max_reward(self.train_tables)
        logger.info(f"Starting training: {steps} steps, baseline {baseline:.4f}, max {best:.4f}")

        history, train_rewards, eval_rewards = [], [], []
        for step in range(1, steps + 1):
            stats = self.train_step(step)
            train_reward = expected_reward(self.policy, self.train_pool, self.train_tables)
            eval_reward = expected_reward(self.policy, self.eval_pool, self.eval_tables)
            history.append(stats)
            train_rewards.append(train_reward)
            eval_rewards.append(eval_reward)
            if on_step is not None:
                on_step(stats, train_reward, eval_reward)
            if step % LOG_EVERY == 0:
                logger.debug(
                    f"step {step}: sampled {stats.mean_reward:.3f}, expected {train_reward:.3f}, "
                    f"eval {eval_reward:.3f}, kl {stats.mean_kl:.5f}"
                )

        result = TrainingResult(
            history=history,
            train_rewards=train_rewards,
            eval_rewards=eval_rewards,
            theta=self.policy.theta.copy(),
            baseline_reward=baseline,
            max_reward=best,
            count_accuracy=count_accuracy(self.policy, self.eval_pool),
        )
        self.show_summary(result)
        return result

    def show_summary(self, result: TrainingResult) -> None:
        logger.info("=" * 70)
        logger.info("TRAINING SUMMARY")
        logger.info("=" * 70)
        logger.info(f"  Steps:              {self.stats['steps']}")
        logger.info(f"  Baseline reward:    {result.baseline_reward:.4f}")
        logger.info(f"  Final reward:       {result.final_reward:.4f}")
        logger.info(f"  Max reward:         {result.max_reward:.4f}")
        logger.info(f"  Final eval reward:  {result.final_eval_reward:.4f}")
        logger.info(f"  Count accuracy:     {result.count_accuracy:.4f}")
        logger.info(f"  Degenerate groups:  {self.stats['degenerate_groups']}")
        logger.info(f"  Clamped log-ratios: {self.stats['clamped']}")
        logger.info("=" * 70)


# ============================================================================
# ABLATION
# ============================================================================

@dataclass(frozen=True)
class AblationRow:
    seed: int
    variant: str
    disabled: Tuple[str, ...]
    count_accuracy: float
    expected_reward: float
    baseline_reward: float

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "variant": self.variant,
            "disabled": list(self.disabled),
            "count_accuracy": self.count_accuracy,
            "expected_reward": self.expected_reward,
            "baseline_reward": self.baseline_reward,
        }


def run_ablation(
    run_config: RunConfig,
    seeds: Sequence[int],
    variants: Optional[Sequence[str]] = None,
    lexicon: Optional[EmbeddingLexicon] = None,
    min_targets: int = 2,
) -> List[AblationRow]:
    """
    Train one policy per (seed, variant) with the variant's components
    disabled and report count accuracy on the evaluation pool.

    Every variant of a seed sees the same scenes and sampling stream.
    """
    variants = list(variants or ABLATION_VARIANTS)
    unknown = [v for v in variants if v not in ABLATION_VARIANTS]
    if unknown:
        raise ConfigurationError(f"Unknown ablation variants: {unknown}. Valid options: {list(ABLATION_VARIANTS)}")

    rows = []
    for seed in seeds:
        for variant in variants:
            disabled = ABLATION_VARIANTS[variant]
            config = replace(run_config, seed=seed, enabled=frozenset(run_config.enabled) - frozenset(disabled))
            config.validate()
            logger.info(f"Ablation seed {seed}, variant {variant}")
            trainer = ToyTrainer(config, lexicon=lexicon, min_targets=min_targets)
            result = trainer.run()
            rows.append(AblationRow(
                seed=seed,
                variant=variant,
                disabled=disabled,
                count_accuracy=result.count_accuracy,
                expected_reward=result.final_eval_reward,
                baseline_reward=result.baseline_reward,
            ))
    summarize_ablation(rows)
    return rows


def summarize_ablation(rows: Sequence[AblationRow]) -> Dict[str, Dict[str, float]]:
    """Mean count accuracy and expected reward per variant."""
    summary: Dict[str, Dict[str, float]] = {}
    for variant in dict.fromkeys(r.variant for r in rows):
        selected = [r for r in rows if r.variant == variant]
        summary[variant] = {
            "count_accuracy": math.fsum(r.count_accuracy for r in selected) / len(selected),
            "expected_reward": math.fsum(r.expected_reward for r in selected) / len(selected),
        }
    logger.info("=" * 70)
    logger.info("ABLATION SUMMARY")
    logger.info("=" * 70)
    for variant, values in summary.items():
        logger.info(
            f"  {variant:<15} count accuracy {values['count_accuracy']:.4f}  "
            f"expected reward {values['expected_reward']:.4f}"
        )
    logger.info("=" * 70)
    return summary
