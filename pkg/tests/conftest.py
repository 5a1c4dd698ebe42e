"""Shared fixtures for the affordance engine test suite."""

import numpy as np
import pytest

from src.dataset_io import GroundingRecord, RecordTarget
from src.geometry import Box, MaskGrid, PointXY, box_center
from src.response_parser import GroundingEntry, StructuredResponse, render_response
from src.toy_env import build_toy_lexicon


def make_record(*targets, record_id="rec-1"):
    """Record from (label, Box) pairs with box-centre centroids."""
    return GroundingRecord(
        id=record_id,
        image_path="img/0001.jpg",
        instruction="Where would you hold it?",
        targets=tuple(RecordTarget(label, None, box, box_center(box)) for label, box in targets),
    )


def make_response(*entries, think="look at the handle", rethink="the handle affords grasping"):
    """Rendered response from (Box, PointXY, label) triples."""
    return render_response(StructuredResponse(
        think_text=think,
        rethink_text=rethink,
        answer_entries=tuple(GroundingEntry(b, p, label) for b, p, label in entries),
    ))


def mask_from_rows(rows):
    return MaskGrid.from_array(np.array(rows, dtype=np.float64))


@pytest.fixture
def lexicon():
    return build_toy_lexicon()


@pytest.fixture
def handle_box():
    return Box(10, 10, 20, 20)


@pytest.fixture
def single_target_record(handle_box):
    return make_record(("graspable", handle_box))


@pytest.fixture
def perfect_response(handle_box):
    return make_response((handle_box, PointXY(15, 15), "graspable"))
