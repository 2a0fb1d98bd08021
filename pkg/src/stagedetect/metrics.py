"""Confusion counts, the standard detection metrics, latency, and k-fold evaluation."""
from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError

METRIC_NAMES = ("accuracy", "precision", "recall", "f1", "fpr")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise DataError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    fpr: float
    counts: ConfusionCounts
    latency_ms: float | None = None
    degenerate: tuple[str, ...] = ()

    @property
    def n_samples(self) -> int:
        return self.counts.total

    def to_json(self, include_latency: bool = True) -> dict:
        c = self.counts
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "fpr": self.fpr,
            "latency_ms": self.latency_ms if include_latency else None,
            "tp": c.tp,
            "tn": c.tn,
            "fp": c.fp,
            "fn": c.fn,
            "n_samples": c.total,
            "degenerate": list(self.degenerate),
        }


def _binary(v, name: str) -> np.ndarray:
    arr = np.asarray(v)
    if arr.ndim != 1:
        raise DataError(f"{name} must be a 1-D vector")
    if arr.size and not np.isin(arr, (0, 1)).all():
        raise DataError(f"{name} contains entries other than 0/1")
    return arr.astype(np.int64)


def confusion(y_true, y_pred) -> ConfusionCounts:
    t = _binary(y_true, "y_true")
    p = _binary(y_pred, "y_pred")
    if t.shape != p.shape:
        raise DataError(f"length mismatch: {t.size} labels vs {p.size} predictions")
    if t.size == 0:
        raise DataError("need at least one prediction")
    return ConfusionCounts(
        tp=int(np.sum((t == 1) & (p == 1))),
        tn=int(np.sum((t == 0) & (p == 0))),
        fp=int(np.sum((t == 0) & (p == 1))),
        fn=int(np.sum((t == 1) & (p == 0))),
    )


def compute_metrics(c: ConfusionCounts, latency_ms: float | None = None) -> MetricsReport:
    """Accuracy, precision, recall, F1 and FPR; a 0/0 ratio is reported as 0 and flagged."""
    if c.total < 1:
        raise DataError("metrics need at least one sample")
    degenerate = []

    def ratio(num, den, name):
        if den == 0:
            degenerate.append(name)
            return 0.0
        return num / den

    accuracy = (c.tp + c.tn) / c.total
    precision = ratio(c.tp, c.tp + c.fp, "precision")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    f1 = ratio(2 * precision * recall, precision + recall, "f1")
    fpr = ratio(c.fp, c.fp + c.tn, "fpr")
    return MetricsReport(accuracy, precision, recall, f1, fpr, c, latency_ms, tuple(degenerate))


def detection_latency(total_time_ms: float, n_samples: int) -> float:
    """Mean time per classified sample."""
    if n_samples < 1:
        raise DataError("n_samples must be >= 1")
    if total_time_ms < 0:
        raise DataError("total time must be non-negative")
    return total_time_ms / n_samples


# ---------------------------------------------------------------------------
# cross-validated evaluation
# ---------------------------------------------------------------------------

@dataclass
class FoldResult:
    fold: int
    ids: list[str]
    y_true: np.ndarray
    y_pred: np.ndarray
    risk: np.ndarray | None
    report: MetricsReport
    total_ms: float
    model_ms: float | None = None


@dataclass
class FoldEvaluation:
    folds: list[FoldResult]
    pooled: MetricsReport
    mean: dict = field(default_factory=dict)
    latency_ms: float = 0.0
    latency_model_ms: float | None = None

    def to_json(self, include_latency: bool = True) -> dict:
        """Deterministic apart from the timing fields, which ``include_latency=False`` nulls."""
        return {
            "per_fold": [
                {"fold": f.fold, "n_test": len(f.ids), **f.report.to_json(include_latency)}
                for f in self.folds
            ],
            "mean": {**self.mean, "latency_ms": self.latency_ms if include_latency else None},
            "pooled": self.pooled.to_json(include_latency),
        }

    def timing_json(self) -> dict:
        return {
            "latency_ms_inclusive": self.latency_ms,
            "latency_ms_model_only": self.latency_model_ms,
            "per_fold": [
                {"fold": f.fold, "total_ms": f.total_ms, "model_ms": f.model_ms, "n": len(f.ids)}
                for f in self.folds
            ],
        }


def _outcome(out) -> tuple[int, float | None]:
    decision = getattr(out, "decision", out)
    return int(decision), getattr(out, "risk", None)


def evaluate_folds(trainer: Callable, plan, ds, seed: int = 0) -> FoldEvaluation:
    """Train on ``k-1`` folds, score the held-out fold, aggregate both ways.

    ``trainer(train_ds, fold_seed)`` returns a scorer ``scorer(sample)`` giving
    either a 0/1 decision or an object with ``decision`` (and optionally
    ``risk``). If the scorer has a ``model_ms`` attribute it is read after each
    fold as model-only time. Samples are handled in id order, so results do
    not depend on dataset order.
    """
    by_id = {s.id: s for s in ds.samples}
    folds = []
    pooled = ConfusionCounts()
    for f in range(plan.k):
        test_ids = sorted(plan.test_ids(f))
        train_ids = sorted(plan.train_ids(f))
        fold_seed = int(np.random.SeedSequence([seed, f]).generate_state(1)[0])
        scorer = trainer(ds.subset(train_ids), fold_seed)
        preds, risks = [], []
        start = time.perf_counter()
        for i in test_ids:
            d, r = _outcome(scorer(by_id[i]))
            preds.append(d)
            risks.append(r)
        total_ms = (time.perf_counter() - start) * 1000.0
        y_true = np.array([by_id[i].label for i in test_ids], dtype=np.int64)
        y_pred = np.array(preds, dtype=np.int64)
        counts = confusion(y_true, y_pred)
        pooled = pooled + counts
        report = compute_metrics(counts, detection_latency(total_ms, len(test_ids)))
        risk = None if any(r is None for r in risks) else np.array(risks)
        folds.append(FoldResult(f, test_ids, y_true, y_pred, risk, report, total_ms,
                                getattr(scorer, "model_ms", None)))
    n = sum(len(r.ids) for r in folds)
    latency = detection_latency(sum(r.total_ms for r in folds), n)
    model_ms = None
    if all(r.model_ms is not None for r in folds):
        model_ms = detection_latency(sum(r.model_ms for r in folds), n)
    mean = {name: float(np.mean([getattr(r.report, name) for r in folds])) for name in METRIC_NAMES}
    return FoldEvaluation(folds, compute_metrics(pooled, latency), mean, latency, model_ms)
