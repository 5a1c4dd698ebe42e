import math
import random

import numpy as np
import pytest

from src.geometry import MaskGrid, write_pgm
from src.metrics import (
    KLD_CAP,
    AllZeroPrediction,
    DimensionMismatch,
    EmptyGroundTruth,
    EmptySet,
    EvalPair,
    InvalidThreshold,
    ManifestError,
    compute_ciou,
    compute_giou,
    compute_kld,
    compute_nss,
    compute_precision,
    compute_sim,
    evaluate_pairs,
    intersection_union,
    load_manifest,
    load_pairs,
    mask_iou,
    p50_95,
)

from conftest import mask_from_rows


def pair(pred_rows, gt_rows, pair_id="p"):
    return EvalPair(pair_id, mask_from_rows(pred_rows), mask_from_rows(gt_rows))


class TestIou:
    def test_hand_example(self):
        assert mask_iou(mask_from_rows([[1, 1, 0, 0]]), mask_from_rows([[0, 1, 1, 0]])) == pytest.approx(1 / 3)

    def test_empty_conventions(self):
        empty = MaskGrid.zeros(3, 2)
        assert mask_iou(empty, empty) == 1.0
        assert mask_iou(empty, mask_from_rows([[1, 0, 0], [0, 0, 0]])) == 0.0

    def test_non_binary_prediction_thresholded(self):
        pred = mask_from_rows([[0.6, 0.4, 0.0]])
        gt = mask_from_rows([[1, 1, 0]])
        assert intersection_union(pred, gt) == (1, 2)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            mask_iou(MaskGrid.zeros(2, 2), MaskGrid.zeros(3, 2))
        with pytest.raises(DimensionMismatch):
            EvalPair("x", MaskGrid.zeros(2, 2), MaskGrid.zeros(2, 3))

    def test_giou_and_ciou(self):
        pairs = [
            pair([[1, 1, 0, 0]], [[0, 1, 1, 0]]),
            pair([[1, 1], [1, 1]], [[1, 1], [1, 1]]),
        ]
        assert compute_giou(pairs) == pytest.approx((1 / 3 + 1) / 2)
        assert compute_ciou(pairs) == pytest.approx(5 / 7)

    def test_ciou_all_empty(self):
        empty = MaskGrid.zeros(2, 2)
        assert compute_ciou([EvalPair("a", empty, empty)]) == 1.0

    def test_empty_set(self):
        with pytest.raises(EmptySet):
            compute_giou([])
        with pytest.raises(EmptySet):
            compute_precision([])

    def test_precision_thresholds(self):
        # IoU 1/3 and 1.0
        pairs = [
            pair([[1, 1, 0, 0]], [[0, 1, 1, 0]]),
            pair([[1, 0]], [[1, 0]]),
        ]
        assert compute_precision(pairs, [0.3, 0.5])[0.5] == 0.5
        assert compute_precision(pairs, [0.3, 0.5])[0.3] == 1.0

    def test_precision_is_strict(self):
        half = [pair([[1, 1, 0, 0]], [[1, 0, 0, 0]])]
        assert compute_precision(half, [0.5])[0.5] == 0.0

    @pytest.mark.parametrize("threshold", [0.0, 1.0, 1.5])
    def test_invalid_threshold(self, threshold):
        with pytest.raises(InvalidThreshold):
            compute_precision([pair([[1]], [[1]])], [threshold])

    def test_p50_95(self):
        # IoU 0.6 passes 0.50 and 0.55 only
        pred = [[1] * 6 + [0] * 4]
        gt = [[1] * 10]
        assert p50_95([pair(pred, gt)]) == pytest.approx(0.2)
        assert p50_95([pair(gt, gt)]) == pytest.approx(1.0)


class TestSaliency:
    def test_kld_identical_is_zero(self):
        m = mask_from_rows([[0.2, 0.8], [0.0, 1.0]])
        gt = mask_from_rows([[1, 1], [0, 1]])
        assert compute_kld(gt, gt) == pytest.approx(0.0, abs=1e-9)
        assert compute_kld(m, gt) > 0.0

    def test_kld_uniform_prediction(self):
        pred = mask_from_rows([[1, 1], [1, 1]])
        gt = mask_from_rows([[1, 0], [0, 0]])
        assert compute_kld(pred, gt) == pytest.approx(math.log(4), rel=1e-9)

    def test_kld_capped(self):
        pred = mask_from_rows([[1, 0]])
        gt = mask_from_rows([[0, 1]])
        assert compute_kld(pred, gt) <= KLD_CAP

    def test_sim(self):
        gt = mask_from_rows([[1, 1, 0, 0]])
        assert compute_sim(gt, gt) == pytest.approx(1.0)
        assert compute_sim(mask_from_rows([[0, 0, 1, 1]]), gt) == 0.0
        assert compute_sim(mask_from_rows([[1, 1, 1, 1]]), gt) == pytest.approx(0.5)

    def test_all_zero_prediction(self):
        zero = MaskGrid.zeros(2, 1)
        gt = mask_from_rows([[1, 0]])
        with pytest.raises(AllZeroPrediction):
            compute_kld(zero, gt)
        with pytest.raises(AllZeroPrediction):
            compute_sim(zero, gt)

    def test_nss_hand_example(self):
        pred = mask_from_rows([[1, 0, 0, 0]])
        gt = mask_from_rows([[1, 0, 0, 0]])
        assert compute_nss(pred, gt) == pytest.approx(math.sqrt(3))

    def test_nss_constant_prediction(self):
        assert compute_nss(mask_from_rows([[0.5, 0.5]]), mask_from_rows([[1, 0]])) == 0.0

    def test_nss_empty_ground_truth(self):
        with pytest.raises(EmptyGroundTruth):
            compute_nss(mask_from_rows([[1, 0]]), MaskGrid.zeros(2, 1))

    def test_kld_is_asymmetric(self):
        spread = mask_from_rows([[1, 1, 1, 1]])
        peak = mask_from_rows([[1, 0, 0, 0]])
        assert compute_kld(spread, peak) == pytest.approx(math.log(4))
        assert compute_kld(peak, spread) > 10 * compute_kld(spread, peak)

    def test_sim_is_symmetric(self):
        rng = np.random.default_rng(21)
        for _ in range(50):
            a = MaskGrid.from_array(rng.random((5, 6)) + 1e-3)
            b = MaskGrid.from_array(rng.random((5, 6)) * (rng.random((5, 6)) < 0.5) + 1e-3)
            assert compute_sim(a, b) == pytest.approx(compute_sim(b, a), abs=1e-12)

    def test_nss_invariant_under_positive_affine_rescale(self):
        rng = np.random.default_rng(22)
        for _ in range(50):
            values = rng.random((6, 5))
            gt = MaskGrid.from_array((rng.random((6, 5)) < 0.3).astype(float))
            gt = MaskGrid.from_array(np.maximum(gt.values, np.eye(6, 5)))
            scale, shift = float(rng.uniform(0.1, 10.0)), float(rng.uniform(0.0, 5.0))
            base = compute_nss(MaskGrid.from_array(values), gt)
            rescaled = compute_nss(MaskGrid.from_array(scale * values + shift), gt)
            assert rescaled == pytest.approx(base, abs=1e-9)


class TestEvaluatePairs:
    def test_degenerate_and_empty_gt_pairs(self):
        pairs = [
            pair([[1, 1, 0, 0]], [[1, 1, 0, 0]], "good"),
            pair([[0, 0, 0, 0]], [[1, 1, 0, 0]], "zero"),
            pair([[1, 0, 0, 0]], [[0, 0, 0, 0]], "nogt"),
        ]
        summary, details = evaluate_pairs(pairs)
        assert summary.n == 3
        assert summary.degenerate == 1
        assert summary.empty_gt == 1
        assert summary.giou == pytest.approx(1 / 3)
        assert summary.ciou == pytest.approx(2 / 5)
        assert summary.p50 == pytest.approx(1 / 3)
        by_id = {row["id"]: row for row in details}
        assert by_id["zero"]["kld"] == KLD_CAP
        assert by_id["zero"]["sim"] == 0.0
        assert by_id["nogt"]["nss"] is None
        # NSS averaged over the two pairs that have foreground
        expected_nss = (compute_nss(pairs[0].pred, pairs[0].gt) + 0.0) / 2
        assert summary.nss == pytest.approx(expected_nss)

    def test_order_independent(self):
        rng = np.random.default_rng(0)
        pairs = [
            EvalPair(
                f"s{i}",
                MaskGrid.from_array(rng.random((6, 7))),
                MaskGrid.from_array((rng.random((6, 7)) < 0.3).astype(float)),
            )
            for i in range(40)
        ]
        shuffled = list(pairs)
        random.Random(1).shuffle(shuffled)
        assert evaluate_pairs(pairs)[0] == evaluate_pairs(shuffled)[0]

    def test_summary_lines(self):
        summary, _ = evaluate_pairs([pair([[1, 0]], [[1, 0]])])
        lines = summary.to_lines()
        assert lines[0] == "giou=1.0"
        assert "n=1" in lines
        assert lines[-1] == "empty_gt=0"


def _reference_scores(pred, gt):
    p, g = pred.astype(float), gt.astype(float)
    pb, gb = p >= 128 / 255, g > 0
    inter, union = int((pb & gb).sum()), int((pb | gb).sum())
    pn, gn = p / (p.sum() + 1e-12), g / (g.sum() + 1e-12)
    kld = sum(gn[i, j] * math.log(gn[i, j] / (pn[i, j] + 1e-12))
              for i in range(g.shape[0]) for j in range(g.shape[1]) if gn[i, j] > 0)
    sim = sum(min(pn[i, j], gn[i, j]) for i in range(g.shape[0]) for j in range(g.shape[1]))
    mean = p.sum() / p.size
    std = math.sqrt(((p - mean) ** 2).sum() / p.size)
    if std < 1e-12:
        return inter, union, kld, sim, 0.0
    nss = sum((p[i, j] - mean) / std for i, j in zip(*np.nonzero(gb))) / gb.sum()
    return inter, union, kld, sim, nss


def test_matches_straight_line_reference():
    rng = np.random.default_rng(11)
    pairs, expected = [], []
    for k in range(200):
        h, w = (int(v) for v in rng.integers(1, 33, size=2))
        pred = rng.random((h, w)) * (rng.random((h, w)) < 0.6)
        pred[0, 0] = 0.9
        gt = (rng.random((h, w)) < 0.4).astype(float)
        gt[-1, -1] = 1.0
        pairs.append(EvalPair(f"r{k}", MaskGrid.from_array(pred), MaskGrid.from_array(gt)))
        expected.append(_reference_scores(pred, gt))

    _, details = evaluate_pairs(pairs)
    for row, (inter, union, kld, sim, nss) in zip(details, expected):
        assert (row["intersection"], row["union"]) == (inter, union)
        assert row["iou"] == inter / union
        assert row["kld"] == pytest.approx(kld, abs=1e-9)
        assert row["sim"] == pytest.approx(sim, abs=1e-9)
        assert row["nss"] == pytest.approx(nss, abs=1e-9)

    counts = [(i, u) for i, u, *_ in expected]
    assert compute_giou(pairs) == pytest.approx(sum(i / u for i, u in counts) / 200, abs=1e-12)
    assert compute_ciou(pairs) == sum(i for i, _ in counts) / sum(u for _, u in counts)
    assert compute_precision(pairs, [0.5])[0.5] == sum(1 for i, u in counts if i / u > 0.5) / 200


class TestManifest:
    def _write(self, tmp_path):
        write_pgm(tmp_path / "pred" / "a.pgm", mask_from_rows([[1.0, 0.5], [0.0, 0.0]]))
        write_pgm(tmp_path / "gt" / "a.pgm", mask_from_rows([[1, 1], [0, 0]]))
        manifest = tmp_path / "manifest.tsv"
        manifest.write_text("# id pred gt\n\na\tpred/a.pgm\tgt/a.pgm\n", encoding="utf-8")
        return manifest

    def test_load_pairs(self, tmp_path):
        pairs = load_pairs(self._write(tmp_path))
        assert [p.id for p in pairs] == ["a"]
        assert pairs[0].pred.values[0, 1] == pytest.approx(128 / 255)
        assert pairs[0].gt.is_binary
        assert load_manifest(tmp_path / "manifest.tsv")[0][1] == tmp_path / "pred" / "a.pgm"

    def test_malformed_line(self, tmp_path):
        manifest = tmp_path / "bad.tsv"
        manifest.write_text("a\tp.pgm\tg.pgm\n\nb\tp.pgm\n", encoding="utf-8")
        with pytest.raises(ManifestError, match=":3:"):
            load_manifest(manifest)
