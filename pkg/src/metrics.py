#!/usr/bin/env python3
"""
Grounding Evaluation Metrics

IoU family (on binary masks):
- gIoU:    mean of per-sample mask IoU
- cIoU:    cumulative IoU, summed intersections over summed unions
- P@t:     fraction of samples with IoU > t
- P@50:95: mean of P@t for t = 0.50, 0.55, ..., 0.95

Saliency family (prediction as a non-negative map, ground truth binary):
- KLD: sum G log(G / (P + eps)) of the sum-normalized maps, capped at 1e6
- SIM: histogram intersection, sum min(P, G)
- NSS: mean standardized prediction over ground-truth pixels

Empty-mask conventions: IoU is 1.0 when both masks are empty and 0.0 when
exactly one is. Summaries use compensated summation so the reduction
order does not matter.
"""

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import settings
from .errors import EngineError
from .geometry import MaskGrid, read_pgm
from .logger_setup import get_logger

logger = get_logger("metrics", settings.LOG_LEVEL)

EPSILON = 1e-12
KLD_CAP = 1e6
NSS_MIN_STD = 1e-12
P50_95_THRESHOLDS = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))


class MetricsError(EngineError):
    """Base class for metric errors"""
    pass


class DimensionMismatch(MetricsError):
    """Raised when prediction and ground truth differ in size"""
    pass


class EmptySet(MetricsError):
    """Raised when a set metric is asked for with no pairs"""
    pass


class AllZeroPrediction(MetricsError):
    """Raised when a saliency metric gets a prediction that sums to zero"""
    pass


class EmptyGroundTruth(MetricsError):
    """Raised when NSS gets a ground truth with no foreground pixel"""
    pass


class InvalidThreshold(MetricsError):
    """Raised when a precision threshold is outside (0, 1)"""
    pass


class ManifestError(MetricsError):
    """Raised when an evaluation manifest line is malformed"""
    pass


@dataclass(frozen=True)
class EvalPair:
    id: str
    pred: MaskGrid
    gt: MaskGrid

    def __post_init__(self):
        _check_dims(self.pred, self.gt)


@dataclass(frozen=True)
class EvalSummary:
    """Dataset-level scores; degenerate counts all-zero predictions."""

    giou: float
    ciou: float
    p50: float
    p50_95: float
    kld: float
    sim: float
    nss: float
    n: int
    degenerate: int = 0
    empty_gt: int = 0

    def to_lines(self) -> List[str]:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name}={value!r}" if isinstance(value, float) else f"{f.name}={value}")
        return lines


def _check_dims(pred: MaskGrid, gt: MaskGrid) -> None:
    if pred.shape != gt.shape:
        raise DimensionMismatch(f"prediction is {pred.width}x{pred.height}, ground truth is {gt.width}x{gt.height}")


def _as_binary(mask: MaskGrid) -> np.ndarray:
    if mask.is_binary:
        return mask.foreground()
    return mask.binarize().foreground()


# ============================================================================
# IOU FAMILY
# ============================================================================

def intersection_union(pred: MaskGrid, gt: MaskGrid) -> Tuple[int, int]:
    """
    Pixel counts of intersection and union.

    Non-binary predictions are binarized at 128/255 first.

    Raises:
        DimensionMismatch: If the masks differ in size
    """
    _check_dims(pred, gt)
    p, g = _as_binary(pred), _as_binary(gt)
    return int(np.count_nonzero(p & g)), int(np.count_nonzero(p | g))


def mask_iou(pred: MaskGrid, gt: MaskGrid) -> float:
    """Pixelwise IoU; 1.0 when both masks are empty."""
    inter, union = intersection_union(pred, gt)
    if union == 0:
        return 1.0
    return inter / union


def _require_pairs(pairs: Sequence[EvalPair]) -> None:
    if not pairs:
        raise EmptySet("no evaluation pairs")


def compute_giou(pairs: Sequence[EvalPair]) -> float:
    _require_pairs(pairs)
    return math.fsum(mask_iou(p.pred, p.gt) for p in pairs) / len(pairs)


def compute_ciou(pairs: Sequence[EvalPair]) -> float:
    _require_pairs(pairs)
    counts = [intersection_union(p.pred, p.gt) for p in pairs]
    total_union = sum(u for _, u in counts)
    if total_union == 0:
        return 1.0
    return sum(i for i, _ in counts) / total_union


def compute_precision(
    pairs: Sequence[EvalPair],
    thresholds: Sequence[float] = P50_95_THRESHOLDS,
) -> Dict[float, float]:
    """
    Fraction of pairs whose IoU exceeds each threshold.

    Raises:
        EmptySet: If pairs is empty
        InvalidThreshold: If a threshold is outside (0, 1)
    """
    _require_pairs(pairs)
    for t in thresholds:
        if not 0.0 < t < 1.0:
            raise InvalidThreshold(f"threshold must be in (0, 1), got {t}")
    ious = [mask_iou(p.pred, p.gt) for p in pairs]
    return {t: sum(1 for v in ious if v > t) / len(ious) for t in thresholds}


def p50_95(pairs: Sequence[EvalPair]) -> float:
    precision = compute_precision(pairs, P50_95_THRESHOLDS)
    return math.fsum(precision.values()) / len(P50_95_THRESHOLDS)


# ============================================================================
# SALIENCY FAMILY
# ============================================================================

def _normalized(pred: MaskGrid, gt: MaskGrid) -> Tuple[np.ndarray, np.ndarray]:
    _check_dims(pred, gt)
    total = float(pred.values.sum())
    if total == 0.0:
        raise AllZeroPrediction("prediction map sums to zero")
    g = gt.values
    return pred.values / (total + EPSILON), g / (float(g.sum()) + EPSILON)


def compute_kld(pred: MaskGrid, gt: MaskGrid) -> float:
    """
    KL divergence of the ground-truth distribution from the prediction.

    Raises:
        AllZeroPrediction: If the prediction sums to zero
        DimensionMismatch: If the maps differ in size
    """
    p, g = _normalized(pred, gt)
    support = g > 0
    terms = g[support] * np.log(g[support] / (p[support] + EPSILON))
    return min(max(math.fsum(terms.tolist()), 0.0), KLD_CAP)


def compute_sim(pred: MaskGrid, gt: MaskGrid) -> float:
    """
    Histogram intersection of the normalized maps, in [0, 1].

    Raises:
        AllZeroPrediction: If the prediction sums to zero
        DimensionMismatch: If the maps differ in size
    """
    p, g = _normalized(pred, gt)
    return min(math.fsum(np.minimum(p, g).ravel().tolist()), 1.0)


def compute_nss(pred: MaskGrid, gt: MaskGrid) -> float:
    """
    Normalized scanpath saliency at the ground-truth foreground.

    A constant prediction (std < 1e-12) scores 0.

    Raises:
        EmptyGroundTruth: If the ground truth has no foreground pixel
        DimensionMismatch: If the maps differ in size
    """
    _check_dims(pred, gt)
    fixations = gt.foreground()
    if not fixations.any():
        raise EmptyGroundTruth("ground truth has no foreground pixel")
    values = pred.values
    std = float(values.std())
    if std < NSS_MIN_STD:
        return 0.0
    standardized = (values - values.mean()) / std
    return math.fsum(standardized[fixations].tolist()) / int(fixations.sum())


# ============================================================================
# EVALUATION
# ============================================================================

def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values) if values else 0.0


def evaluate_pairs(pairs: Sequence[EvalPair]) -> Tuple[EvalSummary, List[dict]]:
    """
    Compute every metric over a set of pairs.

    All-zero predictions score the worst KLD and SIM and are counted as
    degenerate; pairs with an empty ground truth are left out of the NSS
    mean and counted in empty_gt.

    Returns:
        Tuple[EvalSummary, List[dict]]: Summary and one detail row per pair

    Raises:
        EmptySet: If pairs is empty
    """
    _require_pairs(pairs)
    details = []
    ious, klds, sims, nsss = [], [], [], []
    inter_total = union_total = 0
    degenerate = empty_gt = 0

    for pair in pairs:
        inter, union = intersection_union(pair.pred, pair.gt)
        iou = 1.0 if union == 0 else inter / union
        try:
            kld = compute_kld(pair.pred, pair.gt)
            sim = compute_sim(pair.pred, pair.gt)
        except AllZeroPrediction:
            kld, sim = KLD_CAP, 0.0
            degenerate += 1
            logger.debug(f"{pair.id}: all-zero prediction")
        try:
            nss: Optional[float] = compute_nss(pair.pred, pair.gt)
            nsss.append(nss)
        except EmptyGroundTruth:
            nss = None
            empty_gt += 1

        ious.append(iou)
        klds.append(kld)
        sims.append(sim)
        inter_total += inter
        union_total += union
        details.append({
            "id": pair.id,
            "iou": iou,
            "intersection": inter,
            "union": union,
            "kld": kld,
            "sim": sim,
            "nss": nss,
        })

    precision = {t: sum(1 for v in ious if v > t) / len(ious) for t in P50_95_THRESHOLDS}
    summary = EvalSummary(
        giou=_mean(ious),
        ciou=1.0 if union_total == 0 else inter_total / union_total,
        p50=precision[0.5],
        p50_95=math.fsum(precision.values()) / len(precision),
        kld=_mean(klds),
        sim=_mean(sims),
        nss=_mean(nsss),
        n=len(pairs),
        degenerate=degenerate,
        empty_gt=empty_gt,
    )
    return summary, details


def load_manifest(path: Union[str, Path]) -> List[Tuple[str, Path, Path]]:
    """
    Read a TSV manifest of `id<TAB>pred_path<TAB>gt_path` lines.

    Blank lines and lines starting with # are skipped; relative paths
    resolve against the manifest's directory.

    Raises:
        ManifestError: With the 1-based line number of a malformed line
    """
    path = Path(path)
    base = path.parent
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.rstrip("\r\n")
            if not stripped.strip() or stripped.lstrip().startswith("#"):
                continue
            parts = stripped.split("\t")
            if len(parts) != 3 or not all(p.strip() for p in parts):
                raise ManifestError(f"{path}:{line_no}: expected 3 tab-separated fields")
            sample_id, pred, gt = (p.strip() for p in parts)
            entries.append((sample_id, base / pred, base / gt))
    return entries


def load_pairs(manifest: Union[str, Path]) -> List[EvalPair]:
    """Load the masks of a manifest: predictions as intensities in [0, 1], ground truth binarized."""
    pairs = [
        EvalPair(id=sample_id, pred=read_pgm(pred, binarize=False), gt=read_pgm(gt, binarize=True))
        for sample_id, pred, gt in load_manifest(manifest)
    ]
    logger.debug(f"Loaded {len(pairs)} evaluation pairs from {manifest}")
    return pairs
