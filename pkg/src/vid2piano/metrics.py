"""Frame-level transcription metrics over pooled roll cells.

Counts true/false positives and false negatives over all K x T cells
(micro averaging), with accuracy defined as TP / (TP + FP + FN).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict

import numpy as np

from .rollcore import PianoRoll, ProbRoll, binarize


@dataclass(frozen=True)
class MetricsReport:
    """Pooled frame-level counts and scores for one prediction/target pair.

    ``defaulted`` lists the scores that hit a zero denominator and were set
    to 0 by convention.
    """

    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    accuracy: float
    f1: float
    threshold: float | None = None
    defaulted: tuple[str, ...] = ()

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        raw = json.loads(text)
        raw["defaulted"] = tuple(raw.get("defaulted", ()))
        return cls(**raw)


def _ratio(num: int, den: int, name: str, defaulted: list[str]) -> float:
    if den > 0:
        return num / den
    defaulted.append(name)
    return 0.0


def _scores(tp: int, fp: int, fn: int) -> tuple[float, float, float, float, tuple[str, ...]]:
    defaulted: list[str] = []
    precision = _ratio(tp, tp + fp, "precision", defaulted)
    recall = _ratio(tp, tp + fn, "recall", defaulted)
    accuracy = _ratio(tp, tp + fp + fn, "accuracy", defaulted)
    if precision + recall > 0:
        f1 = 2.0 * precision * recall / (precision + recall)
    else:
        defaulted.append("f1")
        f1 = 0.0
    return precision, recall, accuracy, f1, tuple(defaulted)


def frame_metrics(
    pred: PianoRoll, gt: PianoRoll, threshold: float | None = None
) -> MetricsReport:
    """Compare two binary rolls of the same shape cell by cell."""
    if pred.data.shape != gt.data.shape:
        raise ValueError(
            f"shape mismatch: pred {pred.data.shape} vs gt {gt.data.shape}"
        )
    p = pred.data.astype(bool)
    g = gt.data.astype(bool)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    precision, recall, accuracy, f1, defaulted = _scores(tp, fp, fn)
    return MetricsReport(tp, fp, fn, precision, recall, accuracy, f1, threshold, defaulted)


def evaluate_run(
    prob_roll: ProbRoll, gt: PianoRoll, thresholds: list[float]
) -> list[MetricsReport]:
    """Binarize at each threshold and score against the ground-truth roll."""
    reports = []
    for ts in thresholds:
        pred = binarize(prob_roll, ts)
        reports.append(frame_metrics(pred, gt, threshold=ts))
    return reports


def format_report_table(reports: list[MetricsReport]) -> str:
    """Render reports as a fixed-width grid (percentages, one row per threshold)."""
    lines = [f"{'TS':>6}  {'Precision':>9}  {'Recall':>9}  {'Accuracy':>9}  {'F1':>9}"]
    for r in reports:
        ts = "-" if r.threshold is None else f"{r.threshold:.2f}"
        lines.append(
            f"{ts:>6}  {100 * r.precision:9.1f}  {100 * r.recall:9.1f}  "
            f"{100 * r.accuracy:9.1f}  {100 * r.f1:9.1f}"
        )
    return "\n".join(lines)
