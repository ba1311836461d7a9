import math

import numpy as np
import pandas as pd
import pytest

from fedrg.errors import ValidationError
from fedrg.metrics_report import (
    METRIC_COLUMNS,
    MetricsRecord,
    append_metrics_row,
    classification_metrics,
    cra,
    detection_confusion,
    summarize_run,
)


class TestClassificationMetrics:
    """Accuracy with macro precision and F-score."""

    def test_perfect_predictions(self):
        assert classification_metrics([0, 1, 2, 1], [0, 1, 2, 1], 3) == (1.0, 1.0, 1.0)

    def test_two_class_confusion(self):
        accuracy, precision, fscore = classification_metrics([0, 1, 0, 1], [0, 0, 1, 1], 2)
        assert accuracy == pytest.approx(0.5)
        assert precision == pytest.approx(0.5)
        assert fscore == pytest.approx(0.5)

    def test_single_predicted_class(self):
        accuracy, precision, _ = classification_metrics([2] * 8, [0, 1, 2, 3] * 2, 4)
        assert accuracy == pytest.approx(0.25)
        assert precision == pytest.approx(0.25 / 4)

    def test_joint_permutation_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            n, C = int(rng.integers(1, 40)), int(rng.integers(2, 6))
            preds, truths = rng.integers(0, C, n), rng.integers(0, C, n)
            order = rng.permutation(n)
            assert classification_metrics(preds, truths, C) == pytest.approx(
                classification_metrics(preds[order], truths[order], C)
            )

    def test_every_class_enters_the_average(self):
        accuracy, precision, fscore = classification_metrics([0, 0, 1], [0, 0, 1], 3)
        assert accuracy == 1.0
        assert precision == pytest.approx(2 / 3)
        assert fscore == pytest.approx(2 / 3)

    def test_errors(self):
        with pytest.raises(ValidationError):
            classification_metrics([], [], 2)
        with pytest.raises(ValidationError):
            classification_metrics([0, 1], [0], 2)
        with pytest.raises(ValidationError):
            classification_metrics([0, 2], [0, 1], 2)


class TestCra:
    """Clean/noise recognition accuracy."""

    def test_examples(self):
        truth = np.array([True, False, True, False])
        assert cra(truth, truth) == 1.0
        assert cra(~truth, truth) == 0.0
        assert cra([True, True, True, True], truth) == 0.5

    def test_symmetry_and_permutation(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            a, b = rng.random(n) < 0.5, rng.random(n) < 0.7
            order = rng.permutation(n)
            assert cra(a, b) == cra(b, a)
            assert cra(a, b) == pytest.approx(cra(a[order], b[order]))

    def test_empty_input(self):
        with pytest.raises(ValidationError):
            cra([], [])

    def test_confusion_counts(self):
        confusion = detection_confusion([True, False, False, True], [True, False, True, False])
        assert (confusion.true_positive, confusion.false_positive) == (1, 1)
        assert (confusion.true_negative, confusion.false_negative) == (1, 1)
        assert confusion.cra == pytest.approx(0.5)
        assert confusion.clean_recall == pytest.approx(0.5)
        assert confusion.noisy_recall == pytest.approx(0.5)

    def test_no_noisy_samples(self):
        confusion = detection_confusion([True, True], [True, True])
        assert confusion.cra == 1.0
        assert math.isnan(confusion.noisy_recall)


class TestReports:
    """CSV rows and the run summary."""

    def records(self):
        return [
            MetricsRecord(0, "init", 0.3, 0.2, 0.25),
            MetricsRecord(1, "stage1", 0.5, 0.4, 0.45),
            MetricsRecord(2, "stage2", 0.7, 0.6, 0.65, cra=0.8, cra_small_loss=0.6),
            MetricsRecord(3, "stage2", 0.6, 0.5, 0.55, cra=0.9, cra_small_loss=0.7),
        ]

    def test_metrics_csv(self, tmp_path):
        path = tmp_path / "metrics.csv"
        path.write_text("stale\n")
        for index, record in enumerate(self.records()):
            append_metrics_row(record, path, start=index == 0)
        frame = pd.read_csv(path)
        assert list(frame.columns) == METRIC_COLUMNS
        assert frame["round"].tolist() == [0, 1, 2, 3]
        assert frame["cra"].isna().tolist() == [True, True, False, False]

    def test_summary(self):
        summary = summarize_run(self.records())
        assert summary["rounds"] == 3
        assert summary["final"]["accuracy"] == 0.6
        assert summary["best_accuracy"] == pytest.approx(0.7)
        assert summary["cra"]["mean"] == pytest.approx(0.85)
        assert summary["cra"]["count"] == 2
        assert summary["cra_small_loss"]["max"] == pytest.approx(0.7)

    def test_empty_summary(self):
        assert summarize_run([]) == {"rounds": 0}
