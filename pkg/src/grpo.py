#!/usr/bin/env python3
"""
Group Relative Policy Optimization

For every query a group of N candidates is sampled from the policy
snapshot taken at step start. Their rewards are standardized inside the
group and used as advantages, with no critic network. The policy then
takes one ascent step on the clipped surrogate with a KL penalty to a
frozen reference policy:

    J = 1/N sum_i [ min(s_i A_i, clip(s_i, 1-eps, 1+eps) A_i) - beta KL_i ]

    s_i  = exp(log pi(o_i) - log pi_old(o_i))
    KL_i = exp(rho_i) - rho_i - 1,   rho_i = log pi_ref(o_i) - log pi(o_i)

Log-probabilities are sequence level: a candidate is one whole structured
response. Any policy implementing the Policy protocol can be trained; the
toy softmax policy in toy_env is the reference implementation.
"""

import math
from concurrent.futures import Executor, ThreadPoolExecutor
from contextlib import ExitStack
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np

from .config import OPTIMIZERS, REWARD_COMPONENTS, RunConfig, settings
from .errors import ConfigurationError, EngineError
from .logger_setup import get_logger

logger = get_logger("grpo", settings.LOG_LEVEL)

# exp(50) is about 5.2e21; larger log-ratios are clamped and counted
LOG_RATIO_CEILING = 50.0

DEGENERATE_STD = 1e-8


class GroupTooSmall(EngineError):
    """Raised when a group has fewer than two candidates"""
    pass


class Policy(Protocol):
    """What grpo_step needs from a policy."""

    theta: np.ndarray

    def sample(self, query: Any, rng: np.random.Generator) -> Tuple[str, float]:
        ...

    def logprob(self, query: Any, text: str, theta: Optional[np.ndarray] = None) -> float:
        ...

    def grad_logprob(self, query: Any, text: str, theta: Optional[np.ndarray] = None) -> np.ndarray:
        ...


@dataclass(frozen=True)
class GrpoConfig:
    """Optimization hyperparameters of one GRPO run."""

    group_size: int = 8
    clip_epsilon: float = 0.2
    kl_beta: float = 5e-3
    learning_rate: float = 0.5
    steps: int = 2000
    seed: int = 7
    temperature: float = 1.0
    weight_decay: float = 0.0
    optimizer: str = "sgd"

    def __post_init__(self):
        errors = []
        if self.group_size < 2:
            errors.append("group_size must be at least 2")
        if not 0.0 < self.clip_epsilon < 1.0:
            errors.append("clip_epsilon must be in (0, 1)")
        if self.kl_beta < 0.0:
            errors.append("kl_beta must be non-negative")
        if self.learning_rate <= 0.0:
            errors.append("learning_rate must be positive")
        if self.temperature <= 0.0:
            errors.append("temperature must be positive")
        if self.weight_decay < 0.0:
            errors.append("weight_decay must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            errors.append(f"optimizer must be one of {OPTIMIZERS}")
        if errors:
            raise ConfigurationError("GRPO configuration invalid:\n" + "\n".join(f"  - {e}" for e in errors))

    @classmethod
    def from_run_config(cls, run: RunConfig) -> "GrpoConfig":
        return cls(
            group_size=run.group_size,
            clip_epsilon=run.clip_epsilon,
            kl_beta=run.kl_beta,
            learning_rate=run.learning_rate,
            steps=run.steps,
            seed=run.seed,
            temperature=run.temperature,
            weight_decay=run.weight_decay,
            optimizer=run.optimizer,
        )


@dataclass(frozen=True)
class Candidate:
    """One sampled response with its log-probabilities, reward and advantage."""

    text: str
    logprob_current: float
    logprob_old: float
    logprob_ref: float
    reward: float = 0.0
    advantage: float = 0.0


@dataclass(frozen=True)
class RolloutGroup:
    """The N candidates sampled for one query."""

    query_id: str
    query: Any
    candidates: Tuple[Candidate, ...]

    def __post_init__(self):
        candidates = tuple(self.candidates)
        if len(candidates) < 2:
            raise GroupTooSmall(f"group '{self.query_id}' has {len(candidates)} candidates, need at least 2")
        object.__setattr__(self, "candidates", candidates)

    @property
    def rewards(self) -> List[float]:
        return [c.reward for c in self.candidates]


@dataclass
class StepStats:
    """Per-step training statistics, emitted as one JSONL row."""

    step: int
    mean_reward: float
    mean_kl: float
    objective: float
    components: Dict[str, float] = field(default_factory=dict)
    clamped: int = 0
    degenerate_groups: int = 0
    grad_norm: float = 0.0
    mean_exact_kl: Optional[float] = None

    def to_dict(self) -> dict:
        row = {
            "step": self.step,
            "mean_reward": self.mean_reward,
            "mean_kl": self.mean_kl,
            "objective": self.objective,
        }
        for name in REWARD_COMPONENTS:
            if name in self.components:
                row[f"reward_{name}"] = self.components[name]
        row["clamped"] = self.clamped
        row["degenerate_groups"] = self.degenerate_groups
        row["grad_norm"] = self.grad_norm
        if self.mean_exact_kl is not None:
            row["mean_exact_kl"] = self.mean_exact_kl
        return row


# ============================================================================
# OBJECTIVE
# ============================================================================

def normalize_advantages(rewards: Sequence[float]) -> List[float]:
    """
    Standardize rewards within a group.

    Uses the population standard deviation; a group whose rewards (nearly)
    tie gets all-zero advantages.

    Raises:
        GroupTooSmall: If fewer than two rewards are given
    """
    if len(rewards) < 2:
        raise GroupTooSmall(f"need at least 2 rewards, got {len(rewards)}")
    r = np.asarray(rewards, dtype=np.float64)
    mean = math.fsum(r) / len(r)
    centered = r - mean
    std = math.sqrt(math.fsum(centered * centered) / len(r))
    if std < DEGENERATE_STD:
        return [0.0] * len(r)
    return (centered / std).tolist()


def _clamp_log_ratio(value: float) -> Tuple[float, bool]:
    if value > LOG_RATIO_CEILING:
        return LOG_RATIO_CEILING, True
    return value, False


def kl_estimate(logprob_current: float, logprob_ref: float) -> float:
    """
    k3 estimate of KL(pi || pi_ref) from one sample of pi.

    Non-negative for every input since exp(x) >= 1 + x.
    """
    rho, _ = _clamp_log_ratio(logprob_ref - logprob_current)
    return max(math.exp(rho) - rho - 1.0, 0.0)


def _ratio(candidate: Candidate) -> float:
    log_ratio, _ = _clamp_log_ratio(candidate.logprob_current - candidate.logprob_old)
    return math.exp(log_ratio)


def _clipped_term(ratio: float, advantage: float, epsilon: float) -> float:
    clipped = min(max(ratio, 1.0 - epsilon), 1.0 + epsilon)
    return min(ratio * advantage, clipped * advantage)


def surrogate_objective(group: RolloutGroup, config: GrpoConfig) -> float:
    """Mean clipped surrogate minus the KL penalty over the group's candidates."""
    terms = [
        _clipped_term(_ratio(c), c.advantage, config.clip_epsilon)
        - config.kl_beta * kl_estimate(c.logprob_current, c.logprob_ref)
        for c in group.candidates
    ]
    return math.fsum(terms) / len(terms)


def _unclipped_active(ratio: float, advantage: float, epsilon: float) -> bool:
    # the min picks the constant clipped branch only outside the trust region
    if ratio > 1.0 + epsilon and advantage > 0:
        return False
    if ratio < 1.0 - epsilon and advantage < 0:
        return False
    return True


def candidate_coefficient(candidate: Candidate, config: GrpoConfig) -> float:
    """
    d(term_i)/d(log pi(o_i)): the weight of grad log pi(o_i) in the objective gradient.

    A clamped log-ratio is constant in theta, so the term it feeds
    contributes nothing.
    """
    log_ratio, ratio_clamped = _clamp_log_ratio(candidate.logprob_current - candidate.logprob_old)
    ratio = math.exp(log_ratio)
    coeff = 0.0
    if not ratio_clamped and _unclipped_active(ratio, candidate.advantage, config.clip_epsilon):
        coeff += candidate.advantage * ratio
    rho, kl_clamped = _clamp_log_ratio(candidate.logprob_ref - candidate.logprob_current)
    if not kl_clamped:
        coeff -= config.kl_beta * (1.0 - math.exp(rho))
    return coeff


def surrogate_gradient(
    groups: Sequence[RolloutGroup],
    policy: Policy,
    config: GrpoConfig,
    theta: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Exact gradient of the mean group objective with respect to theta.

    Contributions are summed in group then candidate order so the result
    does not depend on how scoring was parallelized.
    """
    theta = policy.theta if theta is None else theta
    total = np.zeros_like(theta, dtype=np.float64)
    for group in groups:
        n = len(group.candidates)
        for candidate in group.candidates:
            coeff = candidate_coefficient(candidate, config)
            if coeff != 0.0:
                total += (coeff / n) * policy.grad_logprob(group.query, candidate.text, theta)
    return total / max(len(groups), 1)


def refresh_logprobs(group: RolloutGroup, policy: Policy, theta: np.ndarray) -> RolloutGroup:
    """Copy of the group with logprob_current recomputed under theta."""
    return replace(group, candidates=tuple(
        replace(c, logprob_current=policy.logprob(group.query, c.text, theta))
        for c in group.candidates
    ))


# ============================================================================
# OPTIMIZERS
# ============================================================================

class SgdUpdater:
    """Plain gradient ascent with optional decoupled weight decay."""

    def __init__(self, learning_rate: float, weight_decay: float = 0.0):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        decayed = theta * (1.0 - self.learning_rate * self.weight_decay)
        return decayed + self.learning_rate * grad


class AdamWUpdater:
    """AdamW ascent (betas 0.9/0.999, eps 1e-8, decoupled weight decay)."""

    def __init__(
        self,
        learning_rate: float,
        weight_decay: float = 0.0,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: Optional[np.ndarray] = None
        self.v: Optional[np.ndarray] = None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        decayed = theta * (1.0 - self.learning_rate * self.weight_decay)
        return decayed + self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


def make_updater(config: GrpoConfig):
    if config.optimizer == "adamw":
        return AdamWUpdater(config.learning_rate, config.weight_decay)
    return SgdUpdater(config.learning_rate, config.weight_decay)


# ============================================================================
# TRAINING STEP
# ============================================================================

def _reward_total(result) -> float:
    return float(getattr(result, "total", result))


def _score_group(reward_fn: Callable, query: Any, texts: Sequence[str], executor: Optional[Executor]) -> list:
    if executor is None:
        return [reward_fn(query, t) for t in texts]
    return list(executor.map(lambda t: reward_fn(query, t), texts))


def grpo_step(
    policy: Policy,
    queries: Sequence[Tuple[str, Any]],
    reward_fn: Callable[[Any, str], Any],
    config: GrpoConfig,
    rng: np.random.Generator,
    reference_theta: np.ndarray,
    updater=None,
    step: int = 0,
    workers: Optional[int] = None,
    executor: Optional[Executor] = None,
) -> StepStats:
    """
    Run one GRPO update.

    Args:
        policy: Policy whose theta is updated in place
        queries: (query_id, query) pairs to sample groups for
        reward_fn: reward_fn(query, text) returning a float or an object
            with .total (and optionally per-component .values)
        config: Optimization hyperparameters
        rng: Sampling generator; the only source of randomness
        reference_theta: Parameters of the frozen reference policy
        updater: SgdUpdater/AdamWUpdater carrying optimizer state
        step: Step number recorded in the stats
        workers: Scoring threads (defaults to SCORING_WORKERS); ignored
            when an executor is given
        executor: Long-lived pool to score with; without one a pool is
            opened for this step only when workers > 1

    Returns:
        StepStats: Statistics computed before the parameter update
    """
    updater = updater or make_updater(config)
    workers = workers or settings.SCORING_WORKERS
    theta_old = np.array(policy.theta, dtype=np.float64, copy=True)

    groups: List[RolloutGroup] = []
    rewards_all: List[float] = []
    kls: List[float] = []
    component_values: Dict[str, List[float]] = {}
    clamped = 0
    degenerate = 0

    with ExitStack() as stack:
        if executor is None and workers > 1:
            executor = stack.enter_context(ThreadPoolExecutor(max_workers=workers))
        for query_id, query in queries:
            samples = [policy.sample(query, rng) for _ in range(config.group_size)]
            texts = [text for text, _ in samples]
            results = _score_group(reward_fn, query, texts, executor)
            rewards = [_reward_total(r) for r in results]
            advantages = normalize_advantages(rewards)
            if not any(advantages):
                degenerate += 1

            candidates = []
            for (text, logprob), reward, advantage, result in zip(samples, rewards, advantages, results):
                logprob_ref = policy.logprob(query, text, reference_theta)
                if _clamp_log_ratio(logprob_ref - logprob)[1]:
                    clamped += 1
                candidates.append(Candidate(
                    text=text,
                    logprob_current=logprob,
                    logprob_old=logprob,
                    logprob_ref=logprob_ref,
                    reward=reward,
                    advantage=advantage,
                ))
                kls.append(kl_estimate(logprob, logprob_ref))
                for name, value in getattr(result, "values", {}).items():
                    component_values.setdefault(name, []).append(float(value))
            rewards_all.extend(rewards)
            groups.append(RolloutGroup(query_id=query_id, query=query, candidates=tuple(candidates)))

    objective = math.fsum(surrogate_objective(g, config) for g in groups) / max(len(groups), 1)
    grad = surrogate_gradient(groups, policy, config, theta_old)

    exact = None
    if hasattr(policy, "exact_kl") and groups:
        exact = math.fsum(policy.exact_kl(g.query, reference_theta) for g in groups) / len(groups)

    policy.theta = updater.step(theta_old, grad)

    if clamped:
        logger.warning(f"Step {step}: clamped {clamped} log-ratios at {LOG_RATIO_CEILING}")

    return StepStats(
        step=step,
        mean_reward=math.fsum(rewards_all) / max(len(rewards_all), 1),
        mean_kl=math.fsum(kls) / max(len(kls), 1),
        objective=objective,
        components={k: math.fsum(v) / len(v) for k, v in component_values.items()},
        clamped=clamped,
        degenerate_groups=degenerate,
        grad_norm=float(np.linalg.norm(grad)),
        mean_exact_kl=exact,
    )
