"""Evaluation metrics and per-round records."""

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from sklearn.metrics import accuracy_score, precision_recall_fscore_support

from fedrg.errors import ValidationError
from utils import calculate_statistics

METRIC_COLUMNS = [
    "round",
    "stage",
    "accuracy",
    "macro_precision",
    "macro_fscore",
    "cra",
    "clean_recall",
    "noisy_recall",
    "cra_small_loss",
]


@dataclass
class MetricsRecord:
    round: int
    stage: str
    accuracy: float
    macro_precision: float
    macro_fscore: float
    cra: Optional[float] = None
    per_client_cra: dict = field(default_factory=dict)
    clean_recall: Optional[float] = None
    noisy_recall: Optional[float] = None
    cra_small_loss: Optional[float] = None

    def as_row(self):
        return {column: getattr(self, column) for column in METRIC_COLUMNS}


@dataclass(frozen=True)
class DetectionConfusion:
    """Counts with "noisy" as the positive class."""

    true_positive: int
    false_positive: int
    true_negative: int
    false_negative: int

    @property
    def total(self):
        return self.true_positive + self.false_positive + self.true_negative + self.false_negative

    @property
    def cra(self):
        return (self.true_positive + self.true_negative) / self.total if self.total else math.nan

    @property
    def clean_recall(self):
        clean = self.true_negative + self.false_positive
        return self.true_negative / clean if clean else math.nan

    @property
    def noisy_recall(self):
        noisy = self.true_positive + self.false_negative
        return self.true_positive / noisy if noisy else math.nan


def _as_pair(a, b, dtype):
    a = np.asarray(a, dtype=dtype).reshape(-1)
    b = np.asarray(b, dtype=dtype).reshape(-1)
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch: {a.shape[0]} vs {b.shape[0]}")
    if a.size == 0:
        raise ValidationError("cannot score an empty input")
    return a, b


def classification_metrics(preds, truths, C):
    """
    Accuracy plus macro precision and macro F-score over the C classes.

    Every class in range(C) enters the average; classes never predicted
    contribute precision 0 and classes never present contribute 0 too.
    """
    preds, truths = _as_pair(preds, truths, int)
    if preds.min() < 0 or truths.min() < 0 or preds.max() >= C or truths.max() >= C:
        raise ValidationError(f"class indices must lie in [0, {C})")
    precision, _, fscore, _ = precision_recall_fscore_support(
        truths, preds, labels=np.arange(C), average="macro", zero_division=0
    )
    return float(accuracy_score(truths, preds)), float(precision), float(fscore)


def cra(pred_clean, true_clean):
    """Fraction of samples whose predicted clean/noisy status matches the truth."""
    pred_clean, true_clean = _as_pair(pred_clean, true_clean, bool)
    return float(np.mean(pred_clean == true_clean))


def detection_confusion(pred_clean, true_clean):
    pred_clean, true_clean = _as_pair(pred_clean, true_clean, bool)
    pred_noisy, true_noisy = ~pred_clean, ~true_clean
    return DetectionConfusion(
        true_positive=int(np.sum(pred_noisy & true_noisy)),
        false_positive=int(np.sum(pred_noisy & ~true_noisy)),
        true_negative=int(np.sum(~pred_noisy & ~true_noisy)),
        false_negative=int(np.sum(~pred_noisy & true_noisy)),
    )


def records_frame(records):
    return pd.DataFrame([record.as_row() for record in records], columns=METRIC_COLUMNS)


def append_metrics_row(record, path, start=False):
    """Append one record to a metrics CSV; `start` truncates it and writes the header."""
    frame = records_frame([record])
    frame.to_csv(path, mode="w" if start else "a", header=start, index=False, float_format="%.8f")


def summarize_run(records):
    """Final, best and mean values of the headline metrics."""
    records = list(records)
    frame = records_frame(records)
    summary = {"rounds": len(records) - 1 if records else 0}
    if frame.empty:
        return summary
    final = records[-1]
    summary["final"] = {
        "accuracy": final.accuracy,
        "macro_precision": final.macro_precision,
        "macro_fscore": final.macro_fscore,
        "cra": final.cra,
        "cra_small_loss": final.cra_small_loss,
    }
    summary["best_accuracy"] = float(frame["accuracy"].max())
    summary["cra"] = calculate_statistics(frame, "cra")
    summary["cra_small_loss"] = calculate_statistics(frame, "cra_small_loss")
    return summary
