#!/usr/bin/env python3
"""
Toy Affordance Environment

A desk-scale stand-in for image + instruction grounding. A scene places a
few labelled objects on a 64x64 grid; the instruction names one
affordance implicitly and every object carrying that affordance is a
target.

The policy is a softmax over an enumerated candidate set of structured
responses, so log-probabilities, gradients and KL divergences are exact:

    pi(c) = softmax(theta . phi(c) / temperature)
    grad log pi(c) = (phi(c) - E_pi[phi]) / temperature

Candidates cover every object subset (up to max_answer_entries) with
three box jitters and every label present in the scene, plus two
corrupted-format variants per object so the format rewards carry signal.

Usage:
    rng = np.random.default_rng(7)
    scene = generate_scene(rng, "hard", min_targets=2)
    candidates = CandidateSet.build(scene)
    policy = ToyPolicy.uniform()
    text, logprob = policy_sample(policy, candidates, rng)
"""

import itertools
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import log_softmax

from .config import DIFFICULTIES, settings
from .dataset_io import GroundingRecord, RecordTarget, make_record_id
from .errors import EngineError
from .geometry import Box, box_center, point_l1
from .logger_setup import get_logger
from .response_parser import GroundingEntry, StructuredResponse, render_payload, render_response
from .reward_engine import EmbeddingLexicon

logger = get_logger("toy_env", settings.LOG_LEVEL)

GRID_SIZE = 64
CELL_SIZE = 16
MIN_OBJECT_SIZE = 12
MAX_OBJECT_SIZE = 14

VOCABULARY = (
    "openable",
    "graspable",
    "pourable",
    "sittable",
    "cuttable",
    "pushable",
    "containable",
    "liftable",
)

INSTRUCTIONS = {
    "openable": "I need to get at what is stored inside. Where should I pull?",
    "graspable": "My hands are free and I want to pick something up. Where do I hold it?",
    "pourable": "I want to fill my glass. What can I tip over it?",
    "sittable": "My legs are tired after the walk. Where can I rest?",
    "cuttable": "I need to split this loaf into slices. What should I use?",
    "pushable": "The door is stuck and my hands are full. What can I press?",
    "containable": "I have loose screws everywhere. What can hold them?",
    "liftable": "I need to move this off the floor. Where do I raise it from?",
}

SYNONYMS = {
    "openable": "unsealable",
    "graspable": "holdable",
    "pourable": "tippable",
    "sittable": "seatable",
    "cuttable": "sliceable",
    "pushable": "pressable",
    "containable": "fillable",
    "liftable": "raisable",
}
SYNONYM_COSINE = 0.9

# (name, dx, dy) applied to both corners of every answer box
JITTERS = (("exact", 0, 0), ("small", 2, 2), ("large", 6, 6))

THINK_TEXT = "The instruction implies an action. I look for the object parts that afford it."
RETHINK_TEXT = "I check every region against the implied action before answering."

FEATURES = (
    "label_match",
    "precision",
    "recall",
    "center_offset",
    "size_gap",
    "multi_entry",
    "corrupted",
)

# difficulty -> (object count, distinct label count)
_LAYOUT = {"easy": (2, 2), "hard": (5, 4)}
_MAX_REJECTIONS = 1000


class ToyEnvError(EngineError):
    """Raised on invalid toy environment requests"""
    pass


@dataclass(frozen=True)
class SceneObject:
    box: Box
    affordance_label: str


@dataclass(frozen=True)
class SceneSpec:
    """One synthetic scene with its instruction and ground-truth targets."""

    width: int
    height: int
    objects: Tuple[SceneObject, ...]
    target_label: str
    instruction: str
    targets: Tuple[GroundingEntry, ...]

    @property
    def target_indices(self) -> Tuple[int, ...]:
        return tuple(i for i, o in enumerate(self.objects) if o.affordance_label == self.target_label)

    @property
    def labels(self) -> Tuple[str, ...]:
        """Distinct labels in the scene, in vocabulary order."""
        present = {o.affordance_label for o in self.objects}
        return tuple(label for label in VOCABULARY if label in present)

    def to_record(self) -> GroundingRecord:
        """Ground-truth record; a box mask's centroid is the box centre."""
        layout = ";".join(",".join(map(str, o.box.as_list())) for o in self.objects)
        image_path = f"toy://{self.width}x{self.height}/{layout}"
        return GroundingRecord(
            id=make_record_id(image_path, self.instruction),
            image_path=image_path,
            instruction=self.instruction,
            targets=tuple(
                RecordTarget(t.affordance_label, None, t.bbox, t.point) for t in self.targets
            ),
        )


def _place_objects(rng: np.random.Generator, count: int) -> List[Box]:
    cells_per_row = GRID_SIZE // CELL_SIZE
    cells = rng.choice(cells_per_row * cells_per_row, size=count, replace=False)
    boxes = []
    for cell in sorted(int(c) for c in cells):
        cx, cy = (cell % cells_per_row) * CELL_SIZE, (cell // cells_per_row) * CELL_SIZE
        w = int(rng.integers(MIN_OBJECT_SIZE, MAX_OBJECT_SIZE + 1))
        h = int(rng.integers(MIN_OBJECT_SIZE, MAX_OBJECT_SIZE + 1))
        x1 = cx + int(rng.integers(1, CELL_SIZE - w))
        y1 = cy + int(rng.integers(1, CELL_SIZE - h))
        boxes.append(Box(x1, y1, x1 + w - 1, y1 + h - 1))
    return boxes


def _draw_scene(rng: np.random.Generator, difficulty: str) -> SceneSpec:
    n_objects, n_labels = _LAYOUT[difficulty]
    labels = [VOCABULARY[int(i)] for i in rng.choice(len(VOCABULARY), size=n_labels, replace=False)]

    if difficulty == "easy":
        object_labels = list(labels)
        target_label = labels[int(rng.integers(n_labels))]
    else:
        # first label appears twice; it is the target half of the time
        object_labels = labels + [labels[0]] * (n_objects - n_labels)
        rng.shuffle(object_labels)
        if rng.random() < 0.5:
            target_label = labels[0]
        else:
            target_label = labels[1 + int(rng.integers(n_labels - 1))]

    boxes = _place_objects(rng, n_objects)
    objects = tuple(SceneObject(box, label) for box, label in zip(boxes, object_labels))
    targets = tuple(
        GroundingEntry(bbox=o.box, point=box_center(o.box), affordance_label=o.affordance_label)
        for o in objects
        if o.affordance_label == target_label
    )
    return SceneSpec(
        width=GRID_SIZE,
        height=GRID_SIZE,
        objects=objects,
        target_label=target_label,
        instruction=INSTRUCTIONS[target_label],
        targets=targets,
    )


def generate_scene(rng: np.random.Generator, difficulty: str, min_targets: int = 1) -> SceneSpec:
    """
    Draw a reproducible scene.

    easy: two objects with two distinct labels, exactly one target.
    hard: five objects over four labels, one label shared by two objects;
          that label is the target half of the time.

    Args:
        rng: Generator; the scene depends only on its state
        difficulty: "easy" or "hard"
        min_targets: Redraw until the scene has at least this many targets

    Raises:
        ToyEnvError: For an unknown difficulty or an unreachable min_targets
    """
    if difficulty not in DIFFICULTIES:
        raise ToyEnvError(f"unknown difficulty '{difficulty}', expected one of {DIFFICULTIES}")
    n_objects, n_labels = _LAYOUT[difficulty]
    max_targets = n_objects - n_labels + 1
    if not 1 <= min_targets <= max_targets:
        raise ToyEnvError(f"{difficulty} scenes have at most {max_targets} targets, asked for {min_targets}")
    for _ in range(_MAX_REJECTIONS):
        scene = _draw_scene(rng, difficulty)
        if len(scene.targets) >= min_targets:
            return scene
    raise ToyEnvError(f"no scene with {min_targets} targets after {_MAX_REJECTIONS} draws")


def generate_scenes(
    rng: np.random.Generator,
    difficulty: str,
    count: int,
    min_targets: int = 1,
) -> List[SceneSpec]:
    return [generate_scene(rng, difficulty, min_targets) for _ in range(count)]


# ============================================================================
# CANDIDATE SET
# ============================================================================

def _jitter_box(box: Box, dx: int, dy: int) -> Box:
    last = GRID_SIZE - 1
    return Box(
        min(box.x1 + dx, last),
        min(box.y1 + dy, last),
        min(box.x2 + dx, last),
        min(box.y2 + dy, last),
    )


@dataclass(frozen=True)
class CandidateInfo:
    """What a candidate answers: object subset, jitter and label; None subset for corrupted ones."""

    objects: Optional[Tuple[int, ...]]
    jitter: str
    label: str

    @property
    def well_formed(self) -> bool:
        return self.objects is not None

    @property
    def entry_count(self) -> int:
        return len(self.objects) if self.objects is not None else 0


class CandidateSet:
    """
    Enumerated responses for one scene with their feature matrix.

    texts[i], info[i] and features[i] describe candidate i; texts are
    unique so a text identifies its candidate.
    """

    def __init__(self, scene: SceneSpec, texts: Sequence[str], info: Sequence[CandidateInfo], features: np.ndarray):
        self.scene = scene
        self.texts = tuple(texts)
        self.info = tuple(info)
        self.features = np.asarray(features, dtype=np.float64)
        self.features.setflags(write=False)
        self.index = {text: i for i, text in enumerate(self.texts)}
        if len(self.index) != len(self.texts):
            raise ToyEnvError("candidate texts must be unique")
        if not self.texts:
            raise ToyEnvError("candidate set is empty")
        self.record = scene.to_record()

    def __len__(self) -> int:
        return len(self.texts)

    def lookup(self, text: str) -> int:
        try:
            return self.index[text]
        except KeyError:
            raise ToyEnvError("text is not a candidate of this scene") from None

    @property
    def target_count(self) -> int:
        return len(self.scene.targets)

    @classmethod
    def build(
        cls,
        scene: SceneSpec,
        max_answer_entries: int = 2,
        include_corrupted: bool = True,
    ) -> "CandidateSet":
        targets = set(scene.target_indices)
        max_entries = min(max_answer_entries, len(scene.objects))
        texts, info, rows = [], [], []

        for size in range(1, max_entries + 1):
            for subset in itertools.combinations(range(len(scene.objects)), size):
                for jitter, dx, dy in JITTERS:
                    for label in scene.labels:
                        entries = []
                        offsets, gaps = [], []
                        for i in subset:
                            box = scene.objects[i].box
                            moved = _jitter_box(box, dx, dy)
                            entries.append(GroundingEntry(moved, box_center(moved), label))
                            offsets.append(point_l1(box_center(moved), box_center(box)) / 8.0)
                            gaps.append(abs(1.0 - moved.area / box.area))
                        hits = len(targets.intersection(subset))
                        texts.append(render_response(StructuredResponse(THINK_TEXT, RETHINK_TEXT, tuple(entries))))
                        info.append(CandidateInfo(subset, jitter, label))
                        rows.append([
                            float(label == scene.target_label),
                            hits / size,
                            hits / len(targets),
                            math.fsum(offsets) / size,
                            math.fsum(gaps) / size,
                            (size - 1) / (max_answer_entries - 1) if max_answer_entries > 1 else 0.0,
                            0.0,
                        ])

        if include_corrupted:
            corrupted_row = [0.0] * (len(FEATURES) - 1) + [1.0]
            for obj in scene.objects:
                entry = GroundingEntry(obj.box, box_center(obj.box), obj.affordance_label)
                payload = render_payload([entry])
                texts.append(f"<think>{THINK_TEXT}</think>\n<answer>{payload}</answer>")
                info.append(CandidateInfo(None, "missing_rethink", obj.affordance_label))
                rows.append(list(corrupted_row))
                texts.append(
                    f"<think>{THINK_TEXT}</think>\n<rethink>{RETHINK_TEXT}</rethink>\n"
                    f"<answer>{payload[:-1]}</answer>"
                )
                info.append(CandidateInfo(None, "malformed_payload", obj.affordance_label))
                rows.append(list(corrupted_row))

        return cls(scene, texts, info, np.array(rows, dtype=np.float64))


# ============================================================================
# POLICY
# ============================================================================

class ToyPolicy:
    """Linear softmax policy over a candidate set's feature rows."""

    def __init__(self, theta: Optional[np.ndarray] = None, temperature: float = 1.0):
        if temperature <= 0.0:
            raise ToyEnvError("temperature must be positive")
        self.theta = np.zeros(len(FEATURES)) if theta is None else np.array(theta, dtype=np.float64)
        if self.theta.shape != (len(FEATURES),):
            raise ToyEnvError(f"theta must have {len(FEATURES)} entries, got shape {self.theta.shape}")
        self.temperature = temperature

    @classmethod
    def uniform(cls, temperature: float = 1.0) -> "ToyPolicy":
        return cls(np.zeros(len(FEATURES)), temperature)

    def _theta(self, theta: Optional[np.ndarray]) -> np.ndarray:
        return self.theta if theta is None else np.asarray(theta, dtype=np.float64)

    def log_distribution(self, candidates: CandidateSet, theta: Optional[np.ndarray] = None) -> np.ndarray:
        logits = candidates.features @ self._theta(theta) / self.temperature
        return log_softmax(logits)

    def distribution(self, candidates: CandidateSet, theta: Optional[np.ndarray] = None) -> np.ndarray:
        return np.exp(self.log_distribution(candidates, theta))

    def sample(self, candidates: CandidateSet, rng: np.random.Generator) -> Tuple[str, float]:
        log_probs = self.log_distribution(candidates)
        probs = np.exp(log_probs)
        index = int(rng.choice(len(candidates), p=probs / probs.sum()))
        return candidates.texts[index], float(log_probs[index])

    def logprob(self, candidates: CandidateSet, text: str, theta: Optional[np.ndarray] = None) -> float:
        return float(self.log_distribution(candidates, theta)[candidates.lookup(text)])

    def grad_logprob_index(self, candidates: CandidateSet, index: int, theta: Optional[np.ndarray] = None) -> np.ndarray:
        probs = self.distribution(candidates, theta)
        expected = probs @ candidates.features
        return (candidates.features[index] - expected) / self.temperature

    def grad_logprob(self, candidates: CandidateSet, text: str, theta: Optional[np.ndarray] = None) -> np.ndarray:
        return self.grad_logprob_index(candidates, candidates.lookup(text), theta)

    def exact_kl(self, candidates: CandidateSet, reference_theta: np.ndarray) -> float:
        """KL(pi_theta || pi_ref) by enumeration."""
        log_p = self.log_distribution(candidates)
        log_q = self.log_distribution(candidates, reference_theta)
        return max(float(np.sum(np.exp(log_p) * (log_p - log_q))), 0.0)


def policy_sample(policy: ToyPolicy, candidates: CandidateSet, rng: np.random.Generator) -> Tuple[str, float]:
    return policy.sample(candidates, rng)


def policy_grad_logprob(policy: ToyPolicy, candidates: CandidateSet, candidate_index: int) -> np.ndarray:
    return policy.grad_logprob_index(candidates, candidate_index)


def exact_kl(policy: ToyPolicy, reference_theta: np.ndarray, candidates: CandidateSet) -> float:
    return policy.exact_kl(candidates, reference_theta)


# ============================================================================
# LEXICON AND ANALYTIC METRICS
# ============================================================================

def build_toy_lexicon() -> EmbeddingLexicon:
    """
    One-hot vectors for the vocabulary plus one synonym per label at
    cosine similarity 0.9 to it. Distinct vocabulary labels are orthogonal.
    """
    n = len(VOCABULARY)
    entries: Dict[str, np.ndarray] = {}
    off_axis = math.sqrt(1.0 - SYNONYM_COSINE ** 2)
    for i, label in enumerate(VOCABULARY):
        base = np.zeros(2 * n)
        base[i] = 1.0
        entries[label] = base
        synonym = np.zeros(2 * n)
        synonym[i] = SYNONYM_COSINE
        synonym[n + i] = off_axis
        entries[SYNONYMS[label]] = synonym
    return EmbeddingLexicon(dimension=2 * n, entries=entries)


def count_accuracy(policy: ToyPolicy, candidate_sets: Sequence[CandidateSet]) -> float:
    """
    Probability that a sampled answer is well-formed and lists as many
    regions as the scene has targets, averaged over scenes.
    """
    if not candidate_sets:
        return 0.0
    values = []
    for candidates in candidate_sets:
        hit = np.array(
            [i.well_formed and i.entry_count == candidates.target_count for i in candidates.info],
            dtype=np.float64,
        )
        values.append(float(policy.distribution(candidates) @ hit))
    return math.fsum(values) / len(values)


def expected_reward(
    policy: ToyPolicy,
    candidate_sets: Sequence[CandidateSet],
    reward_tables: Sequence[np.ndarray],
    theta: Optional[np.ndarray] = None,
) -> float:
    """Policy-weighted mean reward; with theta = 0 this is the uniform-policy baseline."""
    if not candidate_sets:
        return 0.0
    values = [
        float(policy.distribution(candidates, theta) @ table)
        for candidates, table in zip(candidate_sets, reward_tables)
    ]
    return math.fsum(values) / len(values)


def max_reward(reward_tables: Sequence[np.ndarray]) -> float:
    """Mean over scenes of the best candidate's reward."""
    if not reward_tables:
        return 0.0
    return math.fsum(float(np.max(t)) for t in reward_tables) / len(reward_tables)
