"""Tests for IOH-restricted errors, event decisions, the evaluation summary and report rendering."""

import csv
import json
import tempfile
import unittest
from pathlib import Path

import numpy as np

from cohort import ForecastInstance
from configuration import ModelConfig, WindowPolicy
from evalreport import (
    InstanceRecord,
    OracleForecaster,
    PersistenceBaseline,
    ReportWriteError,
    auc,
    bench_inference,
    evaluate_model,
    pointwise_ioh_errors,
    predict_event,
    recall,
    render_report,
)
from fusemodel import FuseForecaster
from trainer import FusionPredictor


def instance(pid: str, target: np.ndarray, last: float = 80.0) -> ForecastInstance:
    target = np.asarray(target, dtype=np.float64)
    history = np.full(90, 80.0)
    history[-1] = last
    below = target < 65
    label = any(below[s : s + 6].all() for s in range(12, 25))
    return ForecastInstance(pid, 0, history, target, label, 10.0, below)


def positive(pid: str) -> ForecastInstance:
    target = np.full(30, 80.0)
    target[14:22] = 58.0
    return instance(pid, target, last=70.0)


def negative(pid: str) -> ForecastInstance:
    return instance(pid, np.full(30, 80.0))


class CountingPredictor:
    name = "counting"

    def __init__(self):
        self.calls = 0

    def predict(self, instances):
        self.calls += 1
        return np.array([i.target for i in instances])


def exhaustive_event(pred: np.ndarray, warning: int, event: int) -> tuple[bool, float]:
    decision, best = False, 0.0
    for start in range(warning, len(pred) - event + 1):
        below = sum(1 for v in pred[start : start + event] if v < 65)
        decision = decision or below / event > 0.6
        best = max(best, below / event)
    return decision, best


def pairwise_auc(labels: list[bool], scores: list[float]) -> float:
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


class TestMetrics(unittest.TestCase):
    def test_errors_only_at_hypotensive_timestamps(self):
        sq, ab = pointwise_ioh_errors([60.0, 70.0, 50.0], [62.0, 90.0, 55.0], [True, False, True])
        np.testing.assert_array_equal(sq, [4.0, 25.0])
        np.testing.assert_array_equal(ab, [2.0, 5.0])
        with self.assertRaises(ValueError):
            pointwise_ioh_errors([1.0], [1.0, 2.0], [True, False])

    def test_exactly_sixty_percent_is_not_an_event(self):
        """With five-sample events, three below-threshold values are exactly 60% and stay negative."""
        policy = WindowPolicy(sampling_interval_s=12.0, horizon=15)
        self.assertEqual((policy.warning_samples, policy.event_samples), (10, 5))
        pred = np.full(15, 80.0)
        pred[10:13] = 60.0
        self.assertEqual(predict_event(pred, policy), (False, 0.6))
        pred[13] = 60.0
        self.assertEqual(predict_event(pred, policy), (True, 0.8))

    def test_warning_window_is_ignored(self):
        policy = WindowPolicy()
        pred = np.full(30, 80.0)
        pred[:12] = 40.0
        self.assertEqual(predict_event(pred, policy), (False, 0.0))
        with self.assertRaises(ValueError):
            predict_event(np.full(17, 50.0), policy)

    def test_event_rule_matches_exhaustive_scan(self):
        policy = WindowPolicy()
        rng = np.random.default_rng(0)
        for _ in range(1000):
            pred = rng.choice([55.0, 64.9, 65.0, 75.0], size=30, p=[0.3, 0.2, 0.1, 0.4])
            decision, score = predict_event(pred, policy)
            expected_decision, expected_score = exhaustive_event(pred, 12, 6)
            self.assertEqual(decision, expected_decision)
            self.assertAlmostEqual(score, expected_score, places=12)

    def test_auc_matches_pairwise_count(self):
        labels = [True, False, True, True, False, False, True, False]
        scores = [0.9, 0.4, 0.4, 0.7, 0.1, 0.7, 0.2, 0.0]
        self.assertAlmostEqual(auc(labels, scores), pairwise_auc(labels, scores), places=12)
        self.assertEqual(auc([True, False], [0.4, 0.4]), 0.5)
        self.assertEqual(auc([True, False, True], [0.9, 0.1, 0.8]), 1.0)

    def test_recall_and_auc_edge_cases(self):
        self.assertAlmostEqual(recall([True, True, False, True], [True, False, False, True]), 2 / 3)
        self.assertIsNone(recall([False, False], [True, False]))
        self.assertEqual(recall([True, True, False], [True, False, True]), 0.5)
        self.assertIsNone(auc([True, True], [0.2, 0.9]))
        self.assertIsNone(auc([False, False], [0.2, 0.9]))
        self.assertEqual(auc([False, True, False, True], [0.1, 0.9, 0.8, 0.3]), 0.75)


class TestEvaluate(unittest.TestCase):
    def setUp(self):
        self.instances = [positive("P1"), positive("P2"), negative("N1"), negative("N2")]
        self.policy = WindowPolicy()

    def test_oracle_is_perfect(self):
        report = evaluate_model(OracleForecaster(), self.instances, self.policy)
        summary = report.summary
        self.assertEqual(summary.predictor, "oracle")
        self.assertEqual((summary.mse_ioh, summary.mae_ioh), (0.0, 0.0))
        self.assertEqual((summary.recall, summary.auc), (1.0, 1.0))
        self.assertEqual((summary.n_instances, summary.n_positives, summary.n_predicted_positives), (4, 2, 2))
        self.assertEqual(summary.n_ioh_timestamps, 16)

    def test_persistence_baseline(self):
        report = evaluate_model(PersistenceBaseline(), self.instances, self.policy)
        self.assertEqual(report.records[0].prediction, [70.0] * 30)
        self.assertAlmostEqual(report.summary.mse_ioh, 144.0)
        self.assertEqual(report.summary.recall, 0.0)

    def test_no_hypotensive_timestamps(self):
        report = evaluate_model(OracleForecaster(), [negative("N1")], self.policy, name="custom")
        self.assertEqual(report.summary.predictor, "custom")
        self.assertIsNone(report.summary.mse_ioh)
        self.assertIsNone(report.summary.recall)
        self.assertIsNone(report.summary.auc)

    def test_empty_test_set(self):
        with self.assertRaises(ValueError):
            evaluate_model(OracleForecaster(), [], self.policy)


class TestReport(unittest.TestCase):
    def setUp(self):
        instances = [positive("P1"), negative("N1"), negative("N2")]
        self.report = evaluate_model(OracleForecaster(), instances, WindowPolicy(), name="iohfuse")
        self.baseline = evaluate_model(PersistenceBaseline(), instances, WindowPolicy())

    def test_files_and_contents(self):
        with tempfile.TemporaryDirectory() as tmp:
            paths = render_report(self.report, Path(tmp) / "report", overlay_count=2, baselines=[self.baseline])
            expected = ["summary.json", "metrics.csv", "per_instance.jsonl", "overlays.png", "roc.png"]
            self.assertEqual([p.name for p in paths], expected)
            self.assertTrue(all(p.stat().st_size > 0 for p in paths))

            summary = json.loads(paths[0].read_text())
            self.assertEqual(summary["model"]["predictor"], "iohfuse")
            self.assertEqual(list(summary["baselines"]), ["persistence"])

            with paths[1].open() as fh:
                rows = list(csv.DictReader(fh))
            self.assertEqual([r["predictor"] for r in rows], ["iohfuse", "persistence"])
            self.assertEqual(rows[1]["recall"], "0.0")

            lines = paths[2].read_text().splitlines()
            self.assertEqual(len(lines), 3)
            self.assertEqual(InstanceRecord.model_validate_json(lines[0]).instance_id, "P1:0")
            self.assertEqual(paths[3].read_bytes()[:4], b"\x89PNG")

    def test_unwritable_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            blocker = Path(tmp) / "report"
            blocker.write_text("not a directory")
            with self.assertRaises(ReportWriteError):
                render_report(self.report, blocker)


class TestBench(unittest.TestCase):
    def test_sample_count_and_warmup(self):
        predictor = CountingPredictor()
        stats = bench_inference(predictor, [positive("P1"), negative("N1")], repetitions=7, warmup=3)
        self.assertEqual(len(stats.samples_ms), 7)
        self.assertEqual(predictor.calls, 10)
        self.assertEqual(stats.batch_size, 2)
        self.assertLessEqual(stats.median_ms, stats.p95_ms)
        self.assertTrue(all(s >= 0 for s in stats.samples_ms))

    def test_needs_instances(self):
        with self.assertRaises(ValueError):
            bench_inference(CountingPredictor(), [])

    def latency(self, n_layers: int) -> float:
        config = ModelConfig(d_model=128, n_heads=4, n_layers=n_layers, history_len=90, horizon=30)
        predictor = FusionPredictor(FuseForecaster(config, vocab_size=64), None)
        return bench_inference(predictor, [negative("N1")], repetitions=30, warmup=3).median_ms

    def test_latency_grows_with_depth(self):
        self.assertLessEqual(self.latency(1), self.latency(8))

    def test_single_forecast_within_budget(self):
        self.assertLess(self.latency(3), 200.0)
