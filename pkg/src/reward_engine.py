#!/usr/bin/env python3
"""
Affordance Reward Engine

Scores one candidate response against one ground-truth record with the
composite affordance reward:

1. Format rewards (binary):
   - format_think:   a well-formed <think> block was found
   - format_rethink: a well-formed <rethink> block was found as well
   - format_answer:  the whole response passed format validation

2. Perception rewards:
   - iou:     fraction of optimally matched box pairs with IoU > 0.5
   - l1:      fraction of matched pairs with box L1 + point L1 < 10
   - box_num: 1 iff the answer has as many entries as the ground truth

3. Recognition reward:
   - recognition: fraction of matched pairs whose predicted label has
     cosine similarity > 0.8 to the ground-truth label, using label
     embeddings from an injected word-vector lexicon

Every component can be switched off and weighted through RewardConfig;
switching one off never changes another's value. Scoring is total: a
response that fails format validation scores 0 on every perception and
recognition component, and an unknown lexicon token degrades only the
recognition component.

Usage:
    lexicon = load_lexicon("labels.vec")
    breakdown = total_reward(text, record, lexicon, RewardConfig())
    print(breakdown.total, breakdown.values)
"""

import itertools
import math
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.optimize import linear_sum_assignment

from .config import REWARD_COMPONENTS, settings
from .errors import ConfigurationError, EngineError
from .geometry import box_iou, box_l1, point_l1
from .logger_setup import get_logger
from .response_parser import (
    STAGE_MISSING_RETHINK,
    STAGE_MISSING_THINK,
    GroundingEntry,
    ParseReport,
    parse_response,
)

logger = get_logger("reward_engine", settings.LOG_LEVEL)

FORMAT_COMPONENTS = ("format_think", "format_rethink", "format_answer")

# Above this many candidate assignments the matcher switches from
# enumeration to the Hungarian algorithm (8! assignments).
MAX_EXHAUSTIVE_ASSIGNMENTS = 40320


class RewardError(EngineError):
    """Base class for reward engine errors"""
    pass


class UnknownToken(RewardError):
    """Raised when a label token is missing from the lexicon"""
    pass


class LexiconFormatError(RewardError):
    """Raised when a lexicon file is malformed"""
    pass


class EmptyPrediction(RewardError):
    """Raised when matching is asked for with no predicted entries"""
    pass


class EmptyGroundTruth(RewardError):
    """Raised when matching is asked for with no ground-truth targets"""
    pass


# ============================================================================
# CONFIGURATION AND RESULT TYPES
# ============================================================================

@dataclass(frozen=True)
class RewardConfig:
    """Thresholds, per-component weights and the enabled component set."""

    iou_threshold: float = 0.5
    l1_threshold: float = 10.0
    similarity_threshold: float = 0.8
    weights: Mapping[str, float] = field(
        default_factory=lambda: {c: 1.0 for c in REWARD_COMPONENTS}
    )
    enabled: FrozenSet[str] = frozenset(REWARD_COMPONENTS)

    def __post_init__(self):
        errors = []
        if not 0.0 < self.iou_threshold < 1.0:
            errors.append("iou_threshold must be in (0, 1)")
        if self.l1_threshold <= 0.0:
            errors.append("l1_threshold must be positive")
        if not 0.0 < self.similarity_threshold < 1.0:
            errors.append("similarity_threshold must be in (0, 1)")
        weights = {c: 1.0 for c in REWARD_COMPONENTS}
        for name, weight in dict(self.weights).items():
            if name not in REWARD_COMPONENTS:
                errors.append(f"unknown component in weights: '{name}'")
            elif weight < 0.0:
                errors.append(f"weight of {name} must be non-negative")
            else:
                weights[name] = float(weight)
        unknown = set(self.enabled) - set(REWARD_COMPONENTS)
        if unknown:
            errors.append(f"unknown components in enabled: {sorted(unknown)}")
        if errors:
            raise ConfigurationError("Reward configuration invalid:\n" + "\n".join(f"  - {e}" for e in errors))
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "enabled", frozenset(self.enabled))

    def without(self, *components: str) -> "RewardConfig":
        """Copy with the given components disabled."""
        return RewardConfig(
            iou_threshold=self.iou_threshold,
            l1_threshold=self.l1_threshold,
            similarity_threshold=self.similarity_threshold,
            weights=dict(self.weights),
            enabled=self.enabled - frozenset(components),
        )

    @property
    def max_total(self) -> float:
        return math.fsum(self.weights[c] for c in REWARD_COMPONENTS if c in self.enabled)


@dataclass(frozen=True)
class MatchedPair:
    """One prediction/ground-truth correspondence with its distances."""

    pred_index: int
    gt_index: int
    iou: float
    box_l1: int
    point_l1: int


@dataclass(frozen=True)
class RewardBreakdown:
    """
    Per-component rewards of one response.

    values holds every component; disabled ones are 0.0 and listed in
    disabled. degraded lists enabled components that scored 0 because of a
    recoverable error (unknown lexicon token).
    """

    values: Mapping[str, float]
    total: float
    matching: Tuple[Tuple[int, int], ...]
    disabled: Tuple[str, ...] = ()
    degraded: Tuple[str, ...] = ()
    failure_stage: str = "ok"

    def to_dict(self) -> dict:
        return {
            "total": self.total,
            "components": {c: self.values[c] for c in REWARD_COMPONENTS},
            "disabled": list(self.disabled),
            "degraded": list(self.degraded),
            "failure_stage": self.failure_stage,
            "matching": [list(pair) for pair in self.matching],
        }


@dataclass(frozen=True, eq=False)
class EmbeddingLexicon:
    """Token to dense vector map used to compare affordance labels."""

    dimension: int
    entries: Mapping[str, np.ndarray]

    def __post_init__(self):
        if not isinstance(self.dimension, int) or self.dimension <= 0:
            raise LexiconFormatError(f"dimension must be a positive integer, got {self.dimension!r}")
        checked = {}
        for token, vector in self.entries.items():
            array = np.asarray(vector, dtype=np.float64)
            if array.shape != (self.dimension,):
                raise LexiconFormatError(
                    f"vector for '{token}' has shape {array.shape}, expected ({self.dimension},)"
                )
            if not np.all(np.isfinite(array)) or not np.any(array):
                raise LexiconFormatError(f"vector for '{token}' must be finite with nonzero norm")
            array.setflags(write=False)
            checked[token] = array
        object.__setattr__(self, "entries", checked)

    def __contains__(self, token: str) -> bool:
        return token in self.entries

    def vector(self, token: str) -> np.ndarray:
        try:
            return self.entries[token]
        except KeyError:
            raise UnknownToken(f"token '{token}' not in lexicon") from None


def load_lexicon(path: Union[str, Path]) -> EmbeddingLexicon:
    """
    Read a lexicon file: first line the dimension d, then one
    `token v1 ... vd` line per entry, space separated.

    Raises:
        LexiconFormatError: With the offending line number
    """
    entries: Dict[str, np.ndarray] = {}
    dimension = None
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if dimension is None:
                if len(parts) != 1:
                    raise LexiconFormatError(f"{path}:{line_no}: first line must hold the dimension")
                try:
                    dimension = int(parts[0])
                except ValueError:
                    raise LexiconFormatError(f"{path}:{line_no}: invalid dimension '{parts[0]}'") from None
                continue
            if len(parts) != dimension + 1:
                raise LexiconFormatError(
                    f"{path}:{line_no}: expected {dimension} values for '{parts[0]}', got {len(parts) - 1}"
                )
            try:
                entries[parts[0]] = np.array([float(v) for v in parts[1:]], dtype=np.float64)
            except ValueError:
                raise LexiconFormatError(f"{path}:{line_no}: non-numeric vector value") from None
    if dimension is None:
        raise LexiconFormatError(f"{path}: empty lexicon file")
    try:
        lexicon = EmbeddingLexicon(dimension=dimension, entries=entries)
    except LexiconFormatError as e:
        raise LexiconFormatError(f"{path}: {e}") from None
    logger.debug(f"Loaded lexicon {path}: {len(entries)} tokens, dimension {dimension}")
    return lexicon


def write_lexicon(path: Union[str, Path], lexicon: EmbeddingLexicon) -> None:
    """Write a lexicon in the format read by load_lexicon, tokens sorted."""
    lines = [str(lexicon.dimension)]
    for token in sorted(lexicon.entries):
        values = " ".join(repr(float(v)) for v in lexicon.entries[token])
        lines.append(f"{token} {values}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ============================================================================
# COMPONENT REWARDS
# ============================================================================

def format_reward(report: ParseReport) -> Tuple[int, int, int]:
    """
    Staged format rewards (think, rethink, answer), each 0 or 1.

    think and rethink are credited when parsing got past their stage;
    answer is credited only when the whole response is well-formed.
    """
    think = int(report.passed(STAGE_MISSING_THINK))
    rethink = int(report.passed(STAGE_MISSING_RETHINK))
    answer = int(report.format_ok)
    return think, rethink, answer


def _pair(pred: GroundingEntry, target, pred_index: int, gt_index: int) -> MatchedPair:
    return MatchedPair(
        pred_index=pred_index,
        gt_index=gt_index,
        iou=box_iou(pred.bbox, target.bbox),
        box_l1=box_l1(pred.bbox, target.bbox),
        point_l1=point_l1(pred.point, target.centroid),
    )


def _assignment_count(n: int, k: int) -> int:
    return math.perm(n, k)


def match_entries(pred: Sequence[GroundingEntry], gt: Sequence) -> Tuple[MatchedPair, ...]:
    """
    One-to-one assignment of min(|pred|, |gt|) pairs maximising total IoU.

    Small instances are solved by enumerating every assignment; ties keep
    the lexicographically smallest sorted (pred_index, gt_index) list.

    Args:
        pred: Predicted grounding entries
        gt: Ground-truth targets (objects with bbox and centroid)

    Returns:
        Tuple[MatchedPair, ...]: Pairs sorted by pred_index

    Raises:
        EmptyPrediction: If pred is empty
        EmptyGroundTruth: If gt is empty
    """
    if not pred:
        raise EmptyPrediction("no predicted entries to match")
    if not gt:
        raise EmptyGroundTruth("no ground-truth targets to match")

    iou = np.array([[box_iou(p.bbox, t.bbox) for t in gt] for p in pred], dtype=np.float64)
    n_pred, n_gt = iou.shape
    k = min(n_pred, n_gt)

    if _assignment_count(max(n_pred, n_gt), k) > MAX_EXHAUSTIVE_ASSIGNMENTS:
        rows, cols = linear_sum_assignment(-iou)
        pairs = sorted(zip(rows.tolist(), cols.tolist()))
    else:
        best_total = -1.0
        best_pairs: Optional[List[Tuple[int, int]]] = None
        if n_pred <= n_gt:
            candidates = (list(enumerate(perm)) for perm in itertools.permutations(range(n_gt), k))
        else:
            candidates = (
                sorted((p, g) for g, p in enumerate(perm))
                for perm in itertools.permutations(range(n_pred), k)
            )
        for assignment in candidates:
            total = math.fsum(iou[p, g] for p, g in assignment)
            if total > best_total or (total == best_total and assignment < best_pairs):
                best_total = total
                best_pairs = assignment
        pairs = best_pairs

    return tuple(_pair(pred[p], gt[g], p, g) for p, g in pairs)


def iou_reward(matching: Sequence[MatchedPair], config: RewardConfig) -> float:
    """Fraction of matched pairs whose IoU exceeds the threshold."""
    if not matching:
        return 0.0
    hits = sum(1 for pair in matching if pair.iou > config.iou_threshold)
    return hits / len(matching)


def l1_reward(matching: Sequence[MatchedPair], config: RewardConfig) -> float:
    """Fraction of matched pairs whose box L1 plus point L1 is below the threshold."""
    if not matching:
        return 0.0
    hits = sum(1 for pair in matching if pair.box_l1 + pair.point_l1 < config.l1_threshold)
    return hits / len(matching)


def box_num_reward(pred_count: int, gt_count: int) -> int:
    """1 iff the answer lists exactly as many regions as the ground truth."""
    return int(pred_count == gt_count)


def label_similarity(pred_label: str, gt_label: str, lexicon: EmbeddingLexicon) -> float:
    """
    Cosine similarity of label embeddings.

    A label embeds as the mean of its underscore-separated tokens' vectors.

    Raises:
        UnknownToken: If a token is missing from the lexicon
    """
    vectors = []
    for label in (pred_label, gt_label):
        tokens = [t for t in label.split("_") if t]
        if not tokens:
            raise UnknownToken(f"label '{label}' has no tokens")
        vectors.append(np.mean([lexicon.vector(t) for t in tokens], axis=0))
    a, b = vectors
    norm = float(np.linalg.norm(a) * np.linalg.norm(b))
    if norm == 0.0:
        return 0.0
    return float(np.dot(a, b) / norm)


def recognition_reward(
    pred_label: str,
    gt_label: str,
    lexicon: EmbeddingLexicon,
    config: RewardConfig,
) -> int:
    """
    1 iff the labels are similar enough; identical labels short-circuit
    to 1 without a lexicon lookup.

    Raises:
        UnknownToken: If the labels differ and a token is not in the lexicon
    """
    if pred_label == gt_label:
        return 1
    return int(label_similarity(pred_label, gt_label, lexicon) > config.similarity_threshold)


# ============================================================================
# COMPOSITE REWARD
# ============================================================================

def total_reward(text: str, record, lexicon: EmbeddingLexicon, config: RewardConfig) -> RewardBreakdown:
    """
    Score one response against one ground-truth record.

    Args:
        text: Raw policy output
        record: GroundingRecord (or anything with a non-empty targets list
            of objects carrying bbox, centroid and affordance_label)
        lexicon: Word-vector lexicon for the recognition reward
        config: Thresholds, weights and enabled components

    Returns:
        RewardBreakdown: Component values, weighted total and the matching
    """
    report = parse_response(text)
    think, rethink, answer = format_reward(report)
    values = {c: 0.0 for c in REWARD_COMPONENTS}
    values["format_think"] = float(think)
    values["format_rethink"] = float(rethink)
    values["format_answer"] = float(answer)
    degraded = []
    matching: Tuple[MatchedPair, ...] = ()

    if report.format_ok:
        entries = report.response.answer_entries
        targets = list(record.targets)
        matching = match_entries(entries, targets)
        values["iou"] = iou_reward(matching, config)
        values["l1"] = l1_reward(matching, config)
        values["box_num"] = float(box_num_reward(len(entries), len(targets)))
        if "recognition" in config.enabled:
            try:
                hits = sum(
                    recognition_reward(
                        entries[pair.pred_index].affordance_label,
                        targets[pair.gt_index].affordance_label,
                        lexicon,
                        config,
                    )
                    for pair in matching
                )
                values["recognition"] = hits / len(matching)
            except UnknownToken as e:
                logger.debug(f"Recognition reward degraded: {e}")
                values["recognition"] = 0.0
                degraded.append("recognition")

    disabled = tuple(c for c in REWARD_COMPONENTS if c not in config.enabled)
    for component in disabled:
        values[component] = 0.0

    total = math.fsum(config.weights[c] * values[c] for c in REWARD_COMPONENTS if c in config.enabled)
    return RewardBreakdown(
        values=values,
        total=total,
        matching=tuple((pair.pred_index, pair.gt_index) for pair in matching),
        disabled=disabled,
        degraded=tuple(degraded),
        failure_stage=report.failure_stage,
    )


def score_responses(
    texts: Sequence[str],
    record,
    lexicon: EmbeddingLexicon,
    config: RewardConfig,
    workers: Optional[int] = None,
    executor: Optional[Executor] = None,
) -> List[RewardBreakdown]:
    """
    Score several responses against the same record.

    Results come back in input order for any number of worker threads.
    A caller scoring many batches passes its own executor; otherwise a
    pool lives for this call only.
    """
    def score(text: str) -> RewardBreakdown:
        return total_reward(text, record, lexicon, config)

    if executor is not None:
        return list(executor.map(score, texts))
    workers = workers or settings.SCORING_WORKERS
    if workers <= 1 or len(texts) <= 1:
        return [score(t) for t in texts]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(score, texts))
