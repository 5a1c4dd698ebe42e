#!/usr/bin/env python3
"""
Grounding Dataset Module

Builds and serializes affordance grounding records. Each record pairs an
image reference and an instruction with one or more targets; every target
stores its affordance label, the mask it came from, and the bounding box
and centroid derived from that mask (leftmost, topmost, rightmost and
bottommost foreground pixels; mean foreground coordinate).

Derived fields are stored redundantly so records stay usable on hosts
without mask storage. Strict mode re-derives them from the masks on load
and rejects records whose stored values disagree.

File Format:
    JSONL, UTF-8, one record per line, stable field order:
    {"id", "image_path", "instruction",
     "targets": [{"affordance", "mask_path", "bbox", "centroid"}]}
    The full field table is in docs/formats.md.

Usage:
    record = build_record("img/0001.jpg", "Where would you hold it?",
                          [("graspable", mask, "masks/0001_a.pgm")])
    write_records("train.jsonl", [record])
    records = read_records("train.jsonl", strict=True)
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import pandas as pd
import ujson

from .config import settings
from .errors import EngineError
from .geometry import (
    Box,
    EmptyMask,
    GeometryError,
    MaskGrid,
    PointXY,
    mask_centroid,
    mask_to_box,
    read_pgm,
)
from .logger_setup import get_logger
from .response_parser import LABEL_PATTERN

logger = get_logger("dataset_io", settings.LOG_LEVEL)


class DatasetError(EngineError):
    """Base class for dataset errors"""
    pass


class RecordParseError(DatasetError):
    """Raised when a record line cannot be parsed"""

    def __init__(self, message: str, line_number: Optional[int] = None):
        prefix = f"line {line_number}: " if line_number is not None else ""
        super().__init__(prefix + message)
        self.line_number = line_number


class DerivationMismatch(DatasetError):
    """Raised in strict mode when stored bbox/centroid disagree with the mask"""
    pass


class InvalidRecord(DatasetError):
    """Raised when a record violates its invariants"""
    pass


@dataclass(frozen=True)
class RecordTarget:
    """One grounded target of a record."""

    affordance_label: str
    mask_path: Optional[str]
    bbox: Box
    centroid: PointXY

    def to_dict(self) -> dict:
        return {
            "affordance": self.affordance_label,
            "mask_path": self.mask_path,
            "bbox": self.bbox.as_list(),
            "centroid": self.centroid.as_list(),
        }


@dataclass(frozen=True)
class GroundingRecord:
    """Image reference, instruction and its ordered targets."""

    id: str
    image_path: str
    instruction: str
    targets: Tuple[RecordTarget, ...]

    def __post_init__(self):
        targets = tuple(self.targets)
        if not targets:
            raise InvalidRecord(f"record '{self.id}' has no targets")
        object.__setattr__(self, "targets", targets)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "image_path": self.image_path,
            "instruction": self.instruction,
            "targets": [t.to_dict() for t in self.targets],
        }


def make_record_id(image_path: str, instruction: str) -> str:
    digest = hashlib.sha1(f"{image_path}\n{instruction}".encode("utf-8")).hexdigest()
    return digest[:12]


def build_record(
    image_path: str,
    instruction: str,
    labeled_masks: Sequence[Tuple[str, MaskGrid, Optional[str]]],
    record_id: Optional[str] = None,
) -> GroundingRecord:
    """
    Build a record, deriving bbox and centroid for every target.

    Args:
        image_path: Reference to the source image
        instruction: Instruction text (carried opaquely)
        labeled_masks: (affordance_label, mask, mask_path) per target, in order
        record_id: Optional explicit id; defaults to a content hash

    Returns:
        GroundingRecord: The record with derived fields

    Raises:
        EmptyMask: If a target mask is empty (target_index is set)
        InvalidRecord: If there are no targets or a label is malformed
    """
    targets = []
    for index, (label, mask, mask_path) in enumerate(labeled_masks):
        if not isinstance(label, str) or not LABEL_PATTERN.fullmatch(label):
            raise InvalidRecord(f"target {index}: invalid affordance label {label!r}")
        try:
            bbox = mask_to_box(mask)
            centroid = mask_centroid(mask)
        except EmptyMask:
            raise EmptyMask(f"target {index}: mask has no foreground pixel", target_index=index) from None
        targets.append(RecordTarget(label, mask_path, bbox, centroid))
    return GroundingRecord(
        id=record_id or make_record_id(image_path, instruction),
        image_path=image_path,
        instruction=instruction,
        targets=tuple(targets),
    )


# ============================================================================
# JSONL I/O
# ============================================================================

def read_lines(path: Union[str, Path]) -> Iterator[Tuple[int, str]]:
    """
    Yield (1-based line number, text) for every line of a UTF-8 file,
    without the line terminator.

    Raises:
        RecordParseError: If a line is not valid UTF-8
    """
    with open(path, "rb") as fh:
        for line_no, raw in enumerate(fh, start=1):
            try:
                text = raw.decode("utf-8")
            except UnicodeDecodeError as e:
                raise RecordParseError(f"{path}: invalid UTF-8 ({e.reason})", line_number=line_no) from None
            yield line_no, text.rstrip("\r\n")


def _int_list(value, length: int, what: str) -> List[int]:
    if (
        not isinstance(value, list)
        or len(value) != length
        or not all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    ):
        raise ValueError(f"{what} must be a list of {length} integers")
    return value


def record_from_dict(data: dict) -> GroundingRecord:
    """Decode one record object; raises ValueError/KeyError/GeometryError on bad input."""
    if not isinstance(data, dict):
        raise ValueError("record must be a JSON object")
    for key in ("id", "image_path", "instruction"):
        if not isinstance(data[key], str):
            raise ValueError(f"'{key}' must be a string")
    raw_targets = data["targets"]
    if not isinstance(raw_targets, list):
        raise ValueError("'targets' must be a list")
    targets = []
    for raw in raw_targets:
        if not isinstance(raw, dict):
            raise ValueError("each target must be a JSON object")
        label = raw["affordance"]
        if not isinstance(label, str) or not LABEL_PATTERN.fullmatch(label):
            raise ValueError(f"invalid affordance label {label!r}")
        mask_path = raw.get("mask_path")
        if mask_path is not None and not isinstance(mask_path, str):
            raise ValueError("'mask_path' must be a string or null")
        targets.append(RecordTarget(
            affordance_label=label,
            mask_path=mask_path,
            bbox=Box(*_int_list(raw["bbox"], 4, "bbox")),
            centroid=PointXY(*_int_list(raw["centroid"], 2, "centroid")),
        ))
    return GroundingRecord(
        id=data["id"],
        image_path=data["image_path"],
        instruction=data["instruction"],
        targets=tuple(targets),
    )


def write_records(path: Union[str, Path], records: Iterable[GroundingRecord]) -> int:
    """
    Write records as JSONL.

    Returns:
        int: Number of records written
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(ujson.dumps(record.to_dict(), ensure_ascii=False))
            fh.write("\n")
            count += 1
    logger.debug(f"Wrote {count} records to {path}")
    return count


def verify_record(record: GroundingRecord, mask_root: Union[str, Path]) -> None:
    """
    Re-derive bbox and centroid of every target from its mask file.

    Raises:
        DerivationMismatch: If a target has no mask path, the mask cannot
            be read, or the stored values differ from the derived ones
    """
    root = Path(mask_root)
    for index, target in enumerate(record.targets):
        if not target.mask_path:
            raise DerivationMismatch(f"record '{record.id}' target {index}: no mask_path to verify")
        try:
            mask = read_pgm(root / target.mask_path)
            bbox, centroid = mask_to_box(mask), mask_centroid(mask)
        except GeometryError as e:
            raise DerivationMismatch(f"record '{record.id}' target {index}: {e}") from None
        if bbox != target.bbox or centroid != target.centroid:
            raise DerivationMismatch(
                f"record '{record.id}' target {index}: stored bbox {target.bbox.as_list()} "
                f"centroid {target.centroid.as_list()} but mask gives {bbox.as_list()} "
                f"{centroid.as_list()}"
            )


def read_records(
    path: Union[str, Path],
    strict: bool = False,
    mask_root: Optional[Union[str, Path]] = None,
) -> List[GroundingRecord]:
    """
    Read a JSONL record file.

    Args:
        path: Record file
        strict: Re-derive bbox and centroid from the masks and fail on mismatch
        mask_root: Directory mask paths are relative to (defaults to the
            record file's directory)

    Returns:
        List[GroundingRecord]: Records in file order

    Raises:
        RecordParseError: With the 1-based line number of the bad line
        DerivationMismatch: In strict mode
    """
    path = Path(path)
    root = Path(mask_root) if mask_root is not None else path.parent
    records = []
    for line_no, line in read_lines(path):
        if not line.strip():
            continue
        try:
            record = record_from_dict(ujson.loads(line))
        except (ValueError, KeyError, TypeError, GeometryError, InvalidRecord) as e:
            raise RecordParseError(f"{path}: {e}", line_number=line_no) from None
        if strict:
            verify_record(record, root)
        records.append(record)
    logger.debug(f"Read {len(records)} records from {path}")
    return records


# ============================================================================
# DIRECTORY CONVERSION
# ============================================================================

def convert_directory(directory: Union[str, Path]) -> List[GroundingRecord]:
    """
    Turn a directory of mask/sidecar pairs into records.

    Every NAME.pgm mask needs a NAME.json sidecar holding "affordance",
    "instruction" and "image_path". Masks that share image_path and
    instruction become one multi-target record; files are visited in
    sorted name order. Mask paths in the records are relative to the
    directory.

    Raises:
        RecordParseError: If a sidecar is missing or malformed
        EmptyMask: If a mask has no foreground pixel
    """
    directory = Path(directory)
    groups: Dict[Tuple[str, str], List[Tuple[str, MaskGrid, str]]] = {}
    for mask_file in sorted(directory.glob("*.pgm")):
        sidecar = mask_file.with_suffix(".json")
        if not sidecar.is_file():
            raise RecordParseError(f"missing sidecar {sidecar.name} for {mask_file.name}")
        try:
            meta = ujson.loads(sidecar.read_text(encoding="utf-8"))
            label = meta["affordance"]
            instruction = meta["instruction"]
            image_path = meta["image_path"]
            for key, value in (("affordance", label), ("instruction", instruction), ("image_path", image_path)):
                if not isinstance(value, str) or not value.strip():
                    raise ValueError(f"{key} must be a non-empty string")
        except (ValueError, KeyError, TypeError) as e:
            raise RecordParseError(f"{sidecar.name}: {e}") from None
        mask = read_pgm(mask_file)
        groups.setdefault((image_path, instruction), []).append((label, mask, mask_file.name))

    records = []
    for (image_path, instruction), labeled in groups.items():
        try:
            records.append(build_record(image_path, instruction, labeled))
        except EmptyMask as e:
            name = labeled[e.target_index][2]
            raise EmptyMask(f"{name}: mask has no foreground pixel", target_index=e.target_index) from None
    logger.info(f"Converted {sum(len(g) for g in groups.values())} masks into {len(records)} records")
    return records


def describe_records(records: Sequence[GroundingRecord]) -> Dict[str, object]:
    """
    Dataset statistics.

    Returns:
        Dict[str, object]: record and target counts, target-count
        distribution, affordance label frequencies and mean instruction
        length in words
    """
    if not records:
        return {
            "records": 0,
            "targets": 0,
            "targets_per_record": {},
            "affordances": {},
            "mean_instruction_words": 0.0,
        }

    record_df = pd.DataFrame({
        "n_targets": [len(r.targets) for r in records],
        "instruction_words": [len(r.instruction.split()) for r in records],
    })
    target_df = pd.DataFrame({
        "affordance": [t.affordance_label for r in records for t in r.targets],
    })

    return {
        "records": len(records),
        "targets": int(record_df["n_targets"].sum()),
        "targets_per_record": {
            int(k): int(v) for k, v in record_df["n_targets"].value_counts().sort_index().items()
        },
        "affordances": {
            str(k): int(v) for k, v in target_df["affordance"].value_counts().sort_index().items()
        },
        "mean_instruction_words": float(record_df["instruction_words"].mean()),
    }
