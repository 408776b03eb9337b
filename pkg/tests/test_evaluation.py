"""Tests for density statistics, matching, AP and result files."""

import dataclasses
import itertools
import json
import math
from unittest.mock import patch

import numpy as np
import pytest

from hmfn.dataset import load_dataset
from hmfn.errors import ContractError, DatasetIOError, StatsError
from hmfn.evaluation import (
    EvalReport,
    ThresholdResult,
    average_precision,
    density_stats,
    density_stats_from_positions,
    evaluate,
    load_results,
    match_frame,
    monotonicity_violations,
    precision_recall,
    write_pr_curves,
    write_report,
    write_results,
)
from hmfn.head import Box3D

PED = (0.6, 0.6, 1.7)
ALTERNATING_AP = (51 + 50 * 2 / 3) / 101


def _gt(x, y, label="pedestrian", pts=5):
    return Box3D((x, y, 0.85), PED, label=label, instance_id=f"i{x}{y}", num_lidar_pts=pts)


def _det(x, y, score, label="pedestrian"):
    return Box3D((x, y, 0.85), PED, label=label, score=score)


class _Truth:
    """Just enough of DatasetTables for evaluate()."""

    def __init__(self, frames: dict[str, list[Box3D]]):
        self.frames = frames
        self.sample_index = dict.fromkeys(frames)

    def ground_truth(self, tokens, categories=None, include_empty=False):
        return {
            t: [
                b
                for b in self.frames[t]
                if (categories is None or b.label in categories) and (include_empty or b.visible)
            ]
            for t in tokens
        }


def _greedy_oracle(dets, gts, thr) -> list[bool]:
    """Plain-loop greedy matching over score-sorted detections."""
    free = list(range(len(gts)))
    hits = []
    for d in sorted(dets, key=lambda b: -b.score):
        near = sorted(free, key=lambda j: math.dist(d.center[:2], gts[j].center[:2]))
        if near and math.dist(d.center[:2], gts[near[0]].center[:2]) <= thr:
            free.remove(near[0])
            hits.append(True)
        else:
            hits.append(False)
    return hits


def _optimal_matches(dets, gts, thr) -> int:
    """Maximum matching size by exhaustive assignment."""
    best = 0
    n = len(gts)
    for perm in itertools.permutations(range(n), min(len(dets), n)):
        count = sum(
            math.hypot(d.center[0] - gts[j].center[0], d.center[1] - gts[j].center[1]) <= thr
            for d, j in zip(dets, perm)
        )
        best = max(best, count)
    return best


class TestDensityStats:
    """Tests for crowd statistics."""

    def test_single_pedestrian(self):
        """One person has no neighbors."""
        stats = density_stats_from_positions([np.array([[1.0, 2.0]])])
        assert stats.pedes_per_frame == 1.0
        assert stats.density_2 == stats.density_5 == stats.density_10 == 0.0

    def test_triangle(self):
        """Three people at mutual distance 1 m each have two neighbors."""
        xy = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3) / 2]])
        stats = density_stats_from_positions([xy])
        assert stats.density_2 == pytest.approx(2.0)
        assert stats.density_10 == pytest.approx(2.0)
        assert stats.annotations == 3

    def test_radius_boundaries(self):
        """Neighbors are counted per radius, averaged over people and frames."""
        frames = [np.array([[0.0, 0.0], [4.0, 0.0]]), np.zeros((0, 2))]
        stats = density_stats_from_positions(frames)
        assert stats.pedes_per_frame == 1.0
        assert (stats.density_2, stats.density_5, stats.density_10) == (0.0, 1.0, 1.0)

    def test_zero_frames(self):
        """No frames is a stats error."""
        with pytest.raises(StatsError):
            density_stats_from_positions([])

    def test_dataset_stats(self, tiny_dataset):
        """Dataset statistics count every sample and pedestrian identity."""
        tables = load_dataset(tiny_dataset)
        stats = density_stats(tables)
        assert stats.frames == len(tables.sample)
        assert stats.pedes_per_frame > 0
        assert 0 < stats.instances <= len(tables.instance)
        assert "Pedes/Fr" in stats.format_row()

    def test_empty_selection(self, tiny_dataset):
        """Selecting no samples is a stats error."""
        with pytest.raises(StatsError):
            density_stats(load_dataset(tiny_dataset), sample_tokens=[])


class TestMatching:
    """Tests for greedy center-distance matching."""

    def test_nearest_free_gt(self):
        """Higher-scored detections claim their nearest GT first."""
        gts = [_gt(0.0, 0.0), _gt(1.0, 0.0)]
        dets = [_det(0.4, 0.0, 0.5), _det(0.1, 0.0, 0.9)]
        m = match_frame(dets, gts, 1.0)
        np.testing.assert_array_equal(m.scores, [0.9, 0.5])
        np.testing.assert_array_equal(m.tp, [True, True])
        assert m.fn == 0

    def test_outside_threshold(self):
        """A detection farther than the threshold is a false positive."""
        m = match_frame([_det(0.6, 0.0, 0.9)], [_gt(0.0, 0.0)], 0.5)
        assert not m.tp.any() and m.fn == 1

    def test_each_gt_matched_once(self):
        """Duplicates on the same person count once."""
        m = match_frame([_det(0.0, 0.0, 0.9), _det(0.0, 0.1, 0.8)], [_gt(0.0, 0.0)], 2.0)
        np.testing.assert_array_equal(m.tp, [True, False])

    def test_order_invariant(self):
        """Input order of detections and GTs does not change the result."""
        gts = [_gt(0.0, 0.0), _gt(0.5, 0.0), _gt(3.0, 1.0)]
        dets = [_det(0.2, 0.0, 0.7), _det(0.3, 0.0, 0.7), _det(2.5, 1.0, 0.4)]
        a = match_frame(dets, gts, 1.0)
        b = match_frame(dets[::-1], gts[::-1], 1.0)
        np.testing.assert_array_equal(a.tp, b.tp)
        np.testing.assert_array_equal(a.scores, b.scores)

    def test_negative_threshold(self):
        with pytest.raises(ContractError):
            match_frame([], [], -1.0)

    @pytest.mark.parametrize("seed", range(100))
    def test_matches_greedy_oracle(self, seed):
        """Agrees with a plain-loop greedy matcher on random frames."""
        rng = np.random.default_rng(1000 + seed)
        gts = [_gt(*rng.uniform(-3, 3, size=2)) for _ in range(int(rng.integers(0, 9)))]
        dets = [_det(*rng.uniform(-3, 3, size=2), rng.random()) for _ in range(int(rng.integers(0, 9)))]
        thr = float(rng.choice([0.5, 1.0, 2.0, 4.0]))
        m = match_frame(dets, gts, thr)
        assert m.tp.tolist() == _greedy_oracle(dets, gts, thr)
        assert m.num_gt == len(gts)

    @pytest.mark.parametrize("seed", range(20))
    def test_bounded_by_optimal_matching(self, seed):
        """Greedy TP lies between half the maximum matching and the maximum."""
        rng = np.random.default_rng(seed)
        gts = [_gt(*rng.uniform(-2, 2, size=2)) for _ in range(int(rng.integers(0, 7)))]
        dets = [_det(*rng.uniform(-2, 2, size=2), rng.random()) for _ in range(int(rng.integers(0, 7)))]
        thr = float(rng.choice([0.5, 1.0, 2.0]))
        ordered = sorted(dets, key=lambda d: -d.score)
        tp = int(match_frame(dets, gts, thr).tp.sum())
        k = min(len(dets), len(gts))
        best = max(_optimal_matches(list(s), gts, thr) for s in itertools.combinations(ordered, k))
        assert tp <= best
        assert 2 * tp >= best


class TestAveragePrecision:
    """Tests for interpolated AP."""

    def test_perfect(self):
        assert average_precision(np.array([0.9, 0.8]), np.array([True, True]), 2) == pytest.approx(1.0)

    def test_all_false_positives(self):
        assert average_precision(np.array([0.9, 0.8]), np.array([False, False]), 2) == 0.0

    def test_alternating_hits(self):
        """TP, FP, TP, FP over two GTs."""
        scores = np.array([0.9, 0.8, 0.7, 0.6])
        tp = np.array([True, False, True, False])
        assert average_precision(scores, tp, 2) == pytest.approx(ALTERNATING_AP)

    def test_scores_sorted_internally(self):
        """AP depends on scores, not on the order detections arrive in."""
        scores = np.array([0.6, 0.9, 0.7, 0.8])
        tp = np.array([False, True, True, False])
        assert average_precision(scores, tp, 2) == pytest.approx(ALTERNATING_AP)

    def test_empty_cases(self):
        """No GTs and no detections is perfect; detections without GTs score zero."""
        assert average_precision(np.zeros(0), np.zeros(0, dtype=bool), 0) == 1.0
        assert average_precision(np.array([0.5]), np.array([False]), 0) == 0.0
        assert average_precision(np.zeros(0), np.zeros(0, dtype=bool), 3) == 0.0

    def test_negative_gt_count(self):
        with pytest.raises(ContractError):
            average_precision(np.zeros(0), np.zeros(0, dtype=bool), -1)

    def test_curve(self):
        """Recall and precision are cumulative over score order."""
        curve = precision_recall(np.array([0.9, 0.8]), np.array([True, False]), 1)
        np.testing.assert_allclose(curve.recall, [1.0, 1.0])
        np.testing.assert_allclose(curve.precision, [1.0, 0.5])


class TestEvaluate:
    """Tests for evaluate() and its reports."""

    def _truth(self):
        return _Truth(
            {
                "a": [_gt(0.0, 0.0), _gt(10.0, 0.0), _gt(5.0, 5.0, label="cyclist")],
                "b": [_gt(-3.0, 2.0, pts=0)],
            }
        )

    def test_threshold_dependence(self):
        """A 0.7 m offset misses at 0.5 m and hits at 1 m."""
        results = {"a": [_det(0.7, 0.0, 0.9), _det(10.2, 0.0, 0.8)]}
        report = evaluate(results, self._truth(), thresholds=(0.5, 1.0))
        assert report.ap[0.5] == pytest.approx(25.5 / 101)
        assert report.ap[1.0] == pytest.approx(1.0)
        assert report.mean_ap == pytest.approx((25.5 / 101 + 1.0) / 2)
        first = report.results[0]
        assert (first.tp, first.fp, first.fn) == (1, 1, 1)

    def test_other_classes_and_empty_boxes_ignored(self):
        """Only pedestrians with LiDAR points count by default."""
        results = {"a": [_det(0.0, 0.0, 0.9), _det(10.0, 0.0, 0.9), _det(5.0, 5.0, 0.9, label="cyclist")]}
        assert evaluate(results, self._truth()).mean_ap == pytest.approx(1.0)
        with_empty = evaluate(results, self._truth(), include_empty=True)
        assert with_empty.results[0].fn == 1

    def test_max_range(self):
        """Boxes beyond max_range are dropped on both sides."""
        results = {"a": [_det(0.0, 0.0, 0.9)]}
        assert evaluate(results, self._truth(), max_range=5.0).mean_ap == pytest.approx(1.0)

    def test_ground_truth_as_detections(self, tiny_dataset):
        """Feeding annotations back in scores mAP 1."""
        tables = load_dataset(tiny_dataset)
        gts = tables.ground_truth(sorted(tables.sample_index), categories=("pedestrian",))
        results = {t: [dataclasses.replace(b, score=1.0) for b in boxes] for t, boxes in gts.items()}
        report = evaluate(results, tables)
        assert report.mean_ap == pytest.approx(1.0)
        assert report.frames == len(tables.sample)

    def test_permutation_invariant(self, tiny_dataset):
        """Shuffling detections within frames leaves every AP unchanged."""
        tables = load_dataset(tiny_dataset)
        rng = np.random.default_rng(0)
        gts = tables.ground_truth(sorted(tables.sample_index), categories=("pedestrian",))
        results = {
            t: [
                dataclasses.replace(
                    b, center=(b.center[0] + rng.normal(0, 0.5), b.center[1], b.center[2]), score=rng.random()
                )
                for b in boxes
            ]
            for t, boxes in gts.items()
        }
        shuffled = {t: list(rng.permutation(np.array(boxes, dtype=object))) for t, boxes in results.items()}
        assert evaluate(results, tables).ap == pytest.approx(evaluate(shuffled, tables).ap)

    def test_monotone_in_threshold(self, tiny_dataset):
        """Looser thresholds never lower AP on jittered annotations."""
        tables = load_dataset(tiny_dataset)
        rng = np.random.default_rng(1)
        gts = tables.ground_truth(sorted(tables.sample_index), categories=("pedestrian",))
        results = {
            t: [
                dataclasses.replace(
                    b,
                    center=(*(np.array(b.center[:2]) + rng.normal(0, 0.15, size=2)), b.center[2]),
                    score=rng.random(),
                )
                for b in boxes
            ]
            for t, boxes in gts.items()
        }
        aps = [ap for _, ap in sorted(evaluate(results, tables).ap.items())]
        assert all(a <= b + 1e-12 for a, b in zip(aps, aps[1:]))

    @pytest.mark.parametrize("seed", range(50))
    def test_monotone_on_random_frames(self, seed, tmp_path):
        """Jittered hits plus clutter never lose AP at a looser threshold."""
        rng = np.random.default_rng(500 + seed)
        frames, results = {}, {}
        for f in range(int(rng.integers(1, 5))):
            gts = [_gt(*rng.uniform(-8, 8, size=2)) for _ in range(int(rng.integers(0, 12)))]
            dets = [
                _det(*(np.array(g.center[:2]) + rng.normal(0, rng.uniform(0.1, 1.5), size=2)), rng.random())
                for g in gts
                if rng.random() < 0.85
            ]
            dets += [_det(*rng.uniform(-8, 8, size=2), rng.random()) for _ in range(int(rng.integers(0, 5)))]
            frames[f"s{f}"], results[f"s{f}"] = gts, dets
        dump = tmp_path / "counterexample.json"
        report = evaluate(results, _Truth(frames), counterexample_path=dump)
        assert monotonicity_violations(report) == [], report.ap
        assert report.counterexample is None
        assert not dump.exists()

    def test_violation_writes_counterexample(self, tmp_path):
        """A forced AP drop is dumped with the AP vector, detections and ground truth."""
        results = {"a": [_det(0.0, 0.0, 0.9)]}
        dump = tmp_path / "nested" / "counterexample.json"
        with patch("hmfn.evaluation.average_precision", side_effect=[0.9, 0.6, 0.7, 0.8]):
            report = evaluate(results, self._truth(), counterexample_path=dump)
        assert report.counterexample == dump
        payload = json.loads(dump.read_text())
        assert payload["ap"] == [0.9, 0.6, 0.7, 0.8]
        assert payload["violations"] == [{"tighter": 0.5, "looser": 1.0}]
        assert payload["results"]["a"][0]["translation"] == [0.0, 0.0, 0.85]
        assert len(payload["ground_truth"]["a"]) == 2
        assert payload["report"]["mAP"] == pytest.approx(0.75)

    def test_violation_without_path_only_logs(self, caplog):
        """Without a dump path the violation is logged and nothing is written."""
        with patch("hmfn.evaluation.average_precision", side_effect=[0.5, 0.4]):
            report = evaluate({}, self._truth(), thresholds=(0.5, 1.0))
        assert report.counterexample is None
        assert "not monotone" in caplog.text

    def test_violations_listed_per_adjacent_pair(self):
        """Only adjacent pairs are compared, after sorting by threshold."""
        report = EvalReport(
            results=[
                ThresholdResult(threshold=t, ap=ap, tp=0, fp=0, fn=0)
                for t, ap in [(2.0, 0.5), (0.5, 0.4), (1.0, 0.6), (4.0, 0.5)]
            ]
        )
        assert monotonicity_violations(report) == [(1.0, 2.0)]

    def test_format_table(self):
        """Percentages with two decimals under AP@d headers."""
        results = {"a": [_det(0.0, 0.0, 0.9), _det(10.0, 0.0, 0.9)]}
        report = evaluate(results, self._truth(), thresholds=(0.5,))
        table = report.format_table()
        assert "AP@0.5" in table and "mAP" in table
        assert "100.00" in table


class TestResultFiles:
    """Tests for result, report and PR-curve files."""

    def test_results_round_trip(self, tmp_path):
        """Detections and meta survive a write and load."""
        results = {"b": [_det(1.0, 2.0, 0.3)], "a": [_det(0.0, 0.0, 0.5), _det(4.0, 0.0, 0.9)]}
        path = write_results(tmp_path / "results.json", results, meta={"split": "val"})
        loaded, meta = load_results(path)
        assert meta == {"split": "val"}
        assert [b.score for b in loaded["a"]] == [0.9, 0.5]
        assert loaded["b"][0].center == (1.0, 2.0, 0.85)
        assert loaded["b"][0].size == PED

    def test_missing_file(self, tmp_path):
        with pytest.raises(DatasetIOError):
            load_results(tmp_path / "nope.json")

    def test_malformed_file(self, tmp_path):
        """Records without required fields are I/O errors."""
        path = tmp_path / "bad.json"
        path.write_text(json.dumps({"results": {"a": [{"translation": [0, 0, 0]}]}}))
        with pytest.raises(DatasetIOError, match="Malformed"):
            load_results(path)

    def test_report_and_curves(self, tmp_path):
        """The JSON report carries mAP; the curve file has one line per detection."""
        truth = _Truth({"a": [_gt(0.0, 0.0)]})
        report = evaluate({"a": [_det(0.0, 0.0, 0.9), _det(3.0, 0.0, 0.1)]}, truth, thresholds=(1.0,))
        saved = json.loads(write_report(tmp_path / "report.json", report).read_text())
        assert saved["mAP"] == pytest.approx(1.0)
        lines = write_pr_curves(tmp_path / "pr.txt", report).read_text().splitlines()
        assert lines[0].startswith("#")
        assert len(lines) == 3
