#!/usr/bin/env python3
"""
Tagged Response Parser

Parses the policy's chain-of-thought output and the grounding payload in
its answer block. The wire format is:

    <think>...</think> <rethink>...</rethink> <answer>[...]</answer>

Only whitespace may appear between and around the three blocks, each tag
appears exactly once, tags are literal and case-sensitive, and every block
must be non-empty after trimming. The answer body is a JSON array of one
or more objects with exactly the keys bbox_2d (4 integers), point_2d
(2 integers) and affordance (lowercase token of a-z and underscore).

parse_response never raises: the first failed check is reported through
ParseReport.failure_stage so that rewards can be computed for any string.
The full grammar is documented in docs/formats.md.
"""

import re
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import ujson

from .errors import EngineError
from .geometry import Box, GeometryError, PointXY

THINK = "think"
RETHINK = "rethink"
ANSWER = "answer"
BLOCK_ORDER = (THINK, RETHINK, ANSWER)
ALL_TAGS = tuple(t for name in BLOCK_ORDER for t in (f"<{name}>", f"</{name}>"))

STAGE_MISSING_THINK = "missing_think"
STAGE_MISSING_RETHINK = "missing_rethink"
STAGE_MISSING_ANSWER = "missing_answer"
STAGE_TAG_ORDER = "tag_order"
STAGE_PAYLOAD_SYNTAX = "payload_syntax"
STAGE_PAYLOAD_SEMANTICS = "payload_semantics"
STAGE_OK = "ok"

# Stages in the order they are checked.
FAILURE_STAGES = (
    STAGE_MISSING_THINK,
    STAGE_MISSING_RETHINK,
    STAGE_MISSING_ANSWER,
    STAGE_TAG_ORDER,
    STAGE_PAYLOAD_SYNTAX,
    STAGE_PAYLOAD_SEMANTICS,
    STAGE_OK,
)

PAYLOAD_KEYS = ("bbox_2d", "point_2d", "affordance")
LABEL_PATTERN = re.compile(r"[a-z_]+")


class InvalidResponse(EngineError):
    """Raised when a StructuredResponse is built from invalid parts"""
    pass


@dataclass(frozen=True)
class GroundingEntry:
    """One grounded region: box, point inside the answer, and its label."""

    bbox: Box
    point: PointXY
    affordance_label: str

    def __post_init__(self):
        if not isinstance(self.affordance_label, str) or not LABEL_PATTERN.fullmatch(self.affordance_label):
            raise InvalidResponse(f"invalid affordance label: {self.affordance_label!r}")

    def to_payload(self) -> dict:
        return {
            "bbox_2d": self.bbox.as_list(),
            "point_2d": self.point.as_list(),
            "affordance": self.affordance_label,
        }


@dataclass(frozen=True)
class StructuredResponse:
    """
    Parsed think / rethink / answer triple.

    think_text and rethink_text are stored trimmed; they must be non-empty
    and free of tag literals so that rendering and re-parsing is lossless.
    """

    think_text: str
    rethink_text: str
    answer_entries: Tuple[GroundingEntry, ...]
    raw: str = field(default="", compare=False)

    def __post_init__(self):
        for name in ("think_text", "rethink_text"):
            text = getattr(self, name)
            if not isinstance(text, str) or not text.strip():
                raise InvalidResponse(f"{name} must be a non-empty string")
            if text != text.strip():
                raise InvalidResponse(f"{name} must be trimmed")
            if any(tag in text for tag in ALL_TAGS):
                raise InvalidResponse(f"{name} must not contain tag literals")
        entries = tuple(self.answer_entries)
        if not entries:
            raise InvalidResponse("answer_entries must not be empty")
        object.__setattr__(self, "answer_entries", entries)

    def same_content(self, other: "StructuredResponse") -> bool:
        """Field-wise equality ignoring the raw source string."""
        return (
            self.think_text == other.think_text
            and self.rethink_text == other.rethink_text
            and self.answer_entries == other.answer_entries
        )


@dataclass(frozen=True)
class ParseReport:
    """Outcome of parse_response; response is set iff format_ok."""

    format_ok: bool
    failure_stage: str
    response: Optional[StructuredResponse] = None
    detail: str = ""

    def passed(self, stage: str) -> bool:
        """True when the parser got past the given stage."""
        return FAILURE_STAGES.index(self.failure_stage) > FAILURE_STAGES.index(stage)


def _fail(stage: str, detail: str = "") -> ParseReport:
    return ParseReport(format_ok=False, failure_stage=stage, response=None, detail=detail)


def _locate_block(text: str, name: str) -> Optional[Tuple[int, int, str]]:
    """
    Find the single well-formed block for a tag.

    Returns (start, end, body) where start is the index of the opening tag
    and end the index just past the closing tag, or None.
    """
    open_tag, close_tag = f"<{name}>", f"</{name}>"
    if text.count(open_tag) != 1 or text.count(close_tag) != 1:
        return None
    start = text.index(open_tag)
    close = text.index(close_tag)
    if close < start + len(open_tag):
        return None
    body = text[start + len(open_tag):close]
    if not body.strip():
        return None
    return start, close + len(close_tag), body


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _parse_payload(body: str) -> Tuple[str, str, List[GroundingEntry]]:
    try:
        payload = ujson.loads(body)
    except (ValueError, OverflowError, TypeError, RecursionError) as e:
        return STAGE_PAYLOAD_SYNTAX, f"answer is not valid JSON: {e}", []

    if not isinstance(payload, list) or not payload:
        return STAGE_PAYLOAD_SYNTAX, "answer must be a non-empty JSON array", []

    for index, item in enumerate(payload):
        if not isinstance(item, dict) or set(item.keys()) != set(PAYLOAD_KEYS):
            return STAGE_PAYLOAD_SYNTAX, f"entry {index} must have keys {PAYLOAD_KEYS}", []
        bbox, point, label = item["bbox_2d"], item["point_2d"], item["affordance"]
        if not isinstance(bbox, list) or len(bbox) != 4 or not all(_is_int(v) for v in bbox):
            return STAGE_PAYLOAD_SYNTAX, f"entry {index}: bbox_2d must be 4 integers", []
        if not isinstance(point, list) or len(point) != 2 or not all(_is_int(v) for v in point):
            return STAGE_PAYLOAD_SYNTAX, f"entry {index}: point_2d must be 2 integers", []
        if not isinstance(label, str):
            return STAGE_PAYLOAD_SYNTAX, f"entry {index}: affordance must be a string", []

    entries = []
    for index, item in enumerate(payload):
        try:
            entries.append(GroundingEntry(
                bbox=Box(*item["bbox_2d"]),
                point=PointXY(*item["point_2d"]),
                affordance_label=item["affordance"],
            ))
        except (GeometryError, InvalidResponse) as e:
            return STAGE_PAYLOAD_SEMANTICS, f"entry {index}: {e}", []
    return STAGE_OK, "", entries


def parse_response(text: str) -> ParseReport:
    """
    Validate and parse a tagged response.

    Checks run in a fixed order and the first failure is reported:
    think block, rethink block, answer block, block order and stray text,
    payload syntax, payload semantics.

    Args:
        text: Arbitrary model output

    Returns:
        ParseReport: format_ok with the parsed response, or the failing stage
    """
    if not isinstance(text, str):
        return _fail(STAGE_MISSING_THINK, "response is not a string")

    blocks = {}
    for name, stage in zip(BLOCK_ORDER, FAILURE_STAGES):
        located = _locate_block(text, name)
        if located is None:
            return _fail(stage, f"no single well-formed <{name}> block")
        blocks[name] = located

    spans = [blocks[name] for name in BLOCK_ORDER]
    cursor = 0
    for start, end, _ in spans:
        if start < cursor or text[cursor:start].strip():
            return _fail(STAGE_TAG_ORDER, "blocks out of order or text outside blocks")
        cursor = end
    if text[cursor:].strip():
        return _fail(STAGE_TAG_ORDER, "text after the answer block")

    stage, detail, entries = _parse_payload(blocks[ANSWER][2])
    if stage != STAGE_OK:
        return _fail(stage, detail)

    response = StructuredResponse(
        think_text=blocks[THINK][2].strip(),
        rethink_text=blocks[RETHINK][2].strip(),
        answer_entries=tuple(entries),
        raw=text,
    )
    return ParseReport(format_ok=True, failure_stage=STAGE_OK, response=response)


def render_payload(entries: Sequence[GroundingEntry]) -> str:
    """Compact JSON array with field order bbox_2d, point_2d, affordance."""
    return ujson.dumps([entry.to_payload() for entry in entries])


def render_response(response: StructuredResponse) -> str:
    """
    Canonical serialization of a response.

    parse_response(render_response(r)).response has the same content as r.
    """
    return (
        f"<think>{response.think_text}</think>\n"
        f"<rethink>{response.rethink_text}</rethink>\n"
        f"<answer>{render_payload(response.answer_entries)}</answer>"
    )
