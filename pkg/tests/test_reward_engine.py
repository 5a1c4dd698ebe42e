import itertools
import math

import numpy as np
import pytest

from src.config import REWARD_COMPONENTS
from src.errors import ConfigurationError
from src.geometry import Box, PointXY, box_iou
from src.response_parser import GroundingEntry
from src.reward_engine import (
    EmbeddingLexicon,
    EmptyGroundTruth,
    EmptyPrediction,
    LexiconFormatError,
    RewardConfig,
    UnknownToken,
    box_num_reward,
    iou_reward,
    l1_reward,
    label_similarity,
    load_lexicon,
    match_entries,
    recognition_reward,
    score_responses,
    total_reward,
    write_lexicon,
)

from conftest import make_record, make_response


def _entry(box, point=None, label="graspable"):
    return GroundingEntry(box, point or PointXY(box.x1, box.y1), label)


class TestPerfectAndFormat:
    def test_perfect_response_scores_every_component(self, perfect_response, single_target_record, lexicon):
        breakdown = total_reward(perfect_response, single_target_record, lexicon, RewardConfig())
        assert all(breakdown.values[c] == 1.0 for c in REWARD_COMPONENTS)
        assert breakdown.total == 7.0
        assert breakdown.matching == ((0, 0),)
        assert breakdown.failure_stage == "ok"

    def test_missing_rethink_keeps_only_think(self, single_target_record, lexicon):
        text = '<think>t</think><answer>[{"bbox_2d":[10,10,20,20],"point_2d":[15,15],"affordance":"graspable"}]</answer>'
        breakdown = total_reward(text, single_target_record, lexicon, RewardConfig())
        assert breakdown.values["format_think"] == 1.0
        assert breakdown.values["format_rethink"] == 0.0
        assert breakdown.values["format_answer"] == 0.0
        assert all(breakdown.values[c] == 0.0 for c in ("iou", "l1", "box_num", "recognition"))
        assert breakdown.total == 1.0
        assert breakdown.failure_stage == "missing_rethink"

    def test_bad_payload_gets_think_and_rethink(self, single_target_record, lexicon):
        text = "<think>t</think><rethink>r</rethink><answer>[{]</answer>"
        breakdown = total_reward(text, single_target_record, lexicon, RewardConfig())
        assert breakdown.total == 2.0

    def test_garbage_is_total_zero(self, single_target_record, lexicon):
        breakdown = total_reward("¯\\_(ツ)_/¯", single_target_record, lexicon, RewardConfig())
        assert breakdown.total == 0.0


class TestThresholdRules:
    gt = Box(0, 0, 99, 0)

    @pytest.mark.parametrize("pred, expected", [
        (Box(0, 0, 50, 0), 1.0),   # IoU 0.51
        (Box(0, 0, 48, 0), 0.0),   # IoU 0.49
        (Box(0, 0, 49, 0), 0.0),   # IoU 0.50 is not above the threshold
    ])
    def test_iou_rule(self, pred, expected):
        matching = match_entries([_entry(pred)], make_record(("graspable", self.gt)).targets)
        assert iou_reward(matching, RewardConfig()) == expected

    @pytest.mark.parametrize("box, point, expected", [
        (Box(10, 10, 20, 20), PointXY(24, 15), 1.0),   # 0 + 9
        (Box(11, 10, 20, 20), PointXY(23, 15), 1.0),   # 1 + 8
        (Box(10, 10, 20, 20), PointXY(25, 15), 0.0),   # 0 + 10
        (Box(10, 10, 20, 20), PointXY(26, 15), 0.0),   # 0 + 11
        (Box(12, 10, 20, 20), PointXY(15, 15), 1.0),   # 2 + 0
    ])
    def test_l1_rule(self, box, point, expected):
        record = make_record(("graspable", Box(10, 10, 20, 20)))
        matching = match_entries([GroundingEntry(box, point, "graspable")], record.targets)
        assert l1_reward(matching, RewardConfig()) == expected

    @pytest.mark.parametrize("cosine, expected", [(0.81, 1), (0.79, 0), (0.95, 1), (0.5, 0)])
    def test_recognition_rule(self, cosine, expected):
        lexicon = EmbeddingLexicon(dimension=2, entries={
            "graspable": np.array([1.0, 0.0]),
            "holdable": np.array([cosine, math.sqrt(1.0 - cosine ** 2)]),
        })
        assert label_similarity("holdable", "graspable", lexicon) == pytest.approx(cosine)
        assert recognition_reward("holdable", "graspable", lexicon, RewardConfig()) == expected

    @pytest.mark.parametrize("pred, gt, expected", [
        (1, 1, 1), (3, 3, 1), (2, 1, 0), (2, 3, 0), (1, 2, 0),
    ])
    def test_box_num_rule(self, pred, gt, expected):
        assert box_num_reward(pred, gt) == expected


class TestRecognition:
    def test_identical_labels_skip_lexicon(self):
        empty = EmbeddingLexicon(dimension=2, entries={})
        assert recognition_reward("graspable", "graspable", empty, RewardConfig()) == 1

    def test_multi_token_labels_average_vectors(self):
        lexicon = EmbeddingLexicon(dimension=2, entries={
            "pour": np.array([1.0, 0.0]),
            "able": np.array([0.0, 1.0]),
            "tip": np.array([1.0, 1.0]),
        })
        assert label_similarity("pour_able", "tip", lexicon) == pytest.approx(1.0)

    def test_unknown_token_degrades_only_recognition(self, handle_box, single_target_record, lexicon):
        text = make_response((handle_box, PointXY(15, 15), "wobbly"))
        breakdown = total_reward(text, single_target_record, lexicon, RewardConfig())
        assert breakdown.values["recognition"] == 0.0
        assert breakdown.degraded == ("recognition",)
        assert breakdown.values["iou"] == 1.0
        assert breakdown.total == 6.0

    def test_synonym_counts_as_recognized(self, handle_box, single_target_record, lexicon):
        text = make_response((handle_box, PointXY(15, 15), "holdable"))
        breakdown = total_reward(text, single_target_record, lexicon, RewardConfig())
        assert breakdown.values["recognition"] == 1.0

    def test_unknown_token_raises_in_similarity(self, lexicon):
        with pytest.raises(UnknownToken):
            label_similarity("wobbly", "graspable", lexicon)


class TestMatching:
    def test_reordered_predictions(self):
        a, b = Box(0, 0, 9, 9), Box(30, 30, 39, 39)
        record = make_record(("graspable", a), ("graspable", b))
        matching = match_entries([_entry(b), _entry(a)], record.targets)
        assert [(m.pred_index, m.gt_index) for m in matching] == [(0, 1), (1, 0)]
        assert all(m.iou == 1.0 for m in matching)

    def test_tie_break_lexicographic(self):
        a = Box(0, 0, 9, 9)
        record = make_record(("graspable", a))
        matching = match_entries([_entry(a), _entry(a)], record.targets)
        assert [(m.pred_index, m.gt_index) for m in matching] == [(0, 0)]

    def test_more_predictions_than_targets(self):
        a, b = Box(0, 0, 9, 9), Box(30, 30, 39, 39)
        record = make_record(("graspable", b))
        matching = match_entries([_entry(a), _entry(b)], record.targets)
        assert [(m.pred_index, m.gt_index) for m in matching] == [(1, 0)]

    def test_large_instances_use_assignment_solver(self):
        boxes = [Box(10 * i, 0, 10 * i + 5, 5) for i in range(9)]
        record = make_record(*[("graspable", b) for b in boxes])
        shuffled = [boxes[i] for i in (4, 0, 8, 2, 6, 1, 7, 3, 5)]
        matching = match_entries([_entry(b) for b in shuffled], record.targets)
        assert len(matching) == 9
        assert all(m.iou == 1.0 for m in matching)
        assert [m.gt_index for m in matching] == [4, 0, 8, 2, 6, 1, 7, 3, 5]

    def test_random_instances_reach_best_total_iou(self):
        rng = np.random.default_rng(8)

        def box():
            x, y = rng.integers(0, 30, size=2).tolist()
            w, h = rng.integers(0, 15, size=2).tolist()
            return Box(x, y, x + w, y + h)

        for _ in range(300):
            record = make_record(*[("graspable", box()) for _ in range(3)])
            pred = [_entry(box()) for _ in range(3)]
            best = max(
                math.fsum(box_iou(pred[p].bbox, record.targets[g].bbox) for p, g in enumerate(perm))
                for perm in itertools.permutations(range(3))
            )
            matching = match_entries(pred, record.targets)
            assert [m.pred_index for m in matching] == [0, 1, 2]
            assert sorted(m.gt_index for m in matching) == [0, 1, 2]
            assert math.fsum(m.iou for m in matching) == pytest.approx(best, abs=1e-12)

    def test_empty_inputs(self):
        record = make_record(("graspable", Box(0, 0, 1, 1)))
        with pytest.raises(EmptyPrediction):
            match_entries([], record.targets)
        with pytest.raises(EmptyGroundTruth):
            match_entries([_entry(Box(0, 0, 1, 1))], [])

    def test_fractional_rewards_over_matched_pairs(self, lexicon):
        a, b = Box(0, 0, 9, 9), Box(30, 30, 39, 39)
        record = make_record(("graspable", a), ("graspable", b))
        text = make_response((a, PointXY(5, 5), "graspable"), (Box(50, 50, 59, 59), PointXY(55, 55), "graspable"))
        breakdown = total_reward(text, record, lexicon, RewardConfig())
        assert breakdown.values["iou"] == 0.5
        assert breakdown.values["l1"] == 0.5
        assert breakdown.values["box_num"] == 1.0
        assert breakdown.values["recognition"] == 1.0

    def test_single_answer_for_two_targets_misses_box_num(self, lexicon):
        a, b = Box(0, 0, 9, 9), Box(30, 30, 39, 39)
        record = make_record(("graspable", a), ("graspable", b))
        breakdown = total_reward(make_response((a, PointXY(5, 5), "graspable")), record, lexicon, RewardConfig())
        assert breakdown.values["iou"] == 1.0
        assert breakdown.values["box_num"] == 0.0


class TestConfig:
    def test_disabling_leaves_other_components(self, perfect_response, single_target_record, lexicon):
        full = total_reward(perfect_response, single_target_record, lexicon, RewardConfig())
        reduced = total_reward(perfect_response, single_target_record, lexicon, RewardConfig().without("box_num"))
        assert reduced.values["box_num"] == 0.0
        assert reduced.disabled == ("box_num",)
        for c in REWARD_COMPONENTS:
            if c != "box_num":
                assert reduced.values[c] == full.values[c]
        assert reduced.total == 6.0

    def test_weights(self, perfect_response, single_target_record, lexicon):
        config = RewardConfig(weights={"iou": 2.0, "format_think": 0.5})
        breakdown = total_reward(perfect_response, single_target_record, lexicon, config)
        assert breakdown.total == pytest.approx(7.5)
        assert config.max_total == pytest.approx(7.5)

    @pytest.mark.parametrize("kwargs", [
        {"iou_threshold": 1.5},
        {"l1_threshold": 0.0},
        {"similarity_threshold": 0.0},
        {"weights": {"iou": -1.0}},
        {"weights": {"speed": 1.0}},
        {"enabled": frozenset({"iou", "speed"})},
    ])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            RewardConfig(**kwargs)


class TestLexiconFile:
    def test_round_trip(self, tmp_path, lexicon):
        path = tmp_path / "labels.vec"
        write_lexicon(path, lexicon)
        loaded = load_lexicon(path)
        assert loaded.dimension == lexicon.dimension
        assert set(loaded.entries) == set(lexicon.entries)
        for token, vector in lexicon.entries.items():
            assert np.array_equal(loaded.vector(token), vector)

    @pytest.mark.parametrize("content, line", [
        ("2\nopen 1 0\nhold 1\n", ":3:"),
        ("two\n", ":1:"),
        ("2\nopen 1 x\n", ":2:"),
    ])
    def test_malformed_lines(self, tmp_path, content, line):
        path = tmp_path / "bad.vec"
        path.write_text(content, encoding="utf-8")
        with pytest.raises(LexiconFormatError, match=line):
            load_lexicon(path)

    def test_zero_vector_rejected(self, tmp_path):
        path = tmp_path / "zero.vec"
        path.write_text("2\nopen 0 0\n", encoding="utf-8")
        with pytest.raises(LexiconFormatError):
            load_lexicon(path)


def test_score_responses_order_independent_of_workers(single_target_record, lexicon, handle_box):
    texts = [
        make_response((handle_box, PointXY(15, 15), label))
        for label in ("graspable", "openable", "holdable", "wobbly")
    ] + ["garbage", "<think>t</think>"]
    config = RewardConfig()
    sequential = score_responses(texts, single_target_record, lexicon, config, workers=1)
    threaded = score_responses(texts, single_target_record, lexicon, config, workers=4)
    assert [b.to_dict() for b in sequential] == [b.to_dict() for b in threaded]
    assert [b.total for b in sequential] == [7.0, 6.0, 7.0, 6.0, 0.0, 1.0]
