"""Accuracy, calibration, and selective-prediction metrics for binary predictions.

Confidence is the larger of the two class probabilities, so it lies in
[0.5, 1]. AUROC and AUPRC treat *correct* predictions as the positive class
and confidence as the score, i.e. they measure how well confidence separates
right from wrong answers.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import DomainError

PROB_FLOOR = 1e-12
DEFAULT_REJECTION_RATES = tuple(round(0.05 * k, 10) for k in range(11))


@dataclass(frozen=True)
class PredictionRecord:
    participant_id: int
    task_id: int
    label: int
    predicted: int
    confidence: float
    prob_positive: float


@dataclass
class Predictions:
    """Column view over a set of binary predictions."""

    participant_id: np.ndarray
    task_id: np.ndarray
    label: np.ndarray
    prob_positive: np.ndarray

    def __post_init__(self):
        self.participant_id = np.asarray(self.participant_id, dtype=np.int64)
        self.task_id = np.asarray(self.task_id, dtype=np.int64)
        self.label = np.asarray(self.label, dtype=np.int64)
        self.prob_positive = np.asarray(self.prob_positive, dtype=np.float64)

    @classmethod
    def from_arrays(cls, label, prob_positive, task_id=None, participant_id=None) -> Predictions:
        n = len(label)
        return cls(np.arange(n) if participant_id is None else participant_id,
                   np.zeros(n) if task_id is None else task_id, label, prob_positive)

    @classmethod
    def from_records(cls, records: Sequence[PredictionRecord]) -> Predictions:
        return cls([r.participant_id for r in records], [r.task_id for r in records],
                   [r.label for r in records], [r.prob_positive for r in records])

    @classmethod
    def concat(cls, parts: Sequence[Predictions]) -> Predictions:
        return cls(*(np.concatenate([getattr(p, f) for p in parts])
                     for f in ("participant_id", "task_id", "label", "prob_positive")))

    def __len__(self) -> int:
        return len(self.label)

    @property
    def predicted(self) -> np.ndarray:
        return (self.prob_positive > 0.5).astype(np.int64)

    @property
    def confidence(self) -> np.ndarray:
        return np.maximum(self.prob_positive, 1.0 - self.prob_positive)

    @property
    def correct(self) -> np.ndarray:
        return self.predicted == self.label

    def records(self) -> list[PredictionRecord]:
        return [PredictionRecord(int(a), int(b), int(c), int(d), float(e), float(f))
                for a, b, c, d, e, f in zip(self.participant_id, self.task_id, self.label,
                                            self.predicted, self.confidence, self.prob_positive)]

    def subset(self, mask) -> Predictions:
        return Predictions(self.participant_id[mask], self.task_id[mask], self.label[mask],
                           self.prob_positive[mask])


def _nonempty(preds: Predictions) -> None:
    if len(preds) == 0:
        raise DomainError("metric undefined on an empty record set")


def accuracy(preds: Predictions) -> float:
    _nonempty(preds)
    return float(np.mean(preds.correct))


def per_task_accuracy(preds: Predictions) -> dict[int, float]:
    return {int(t): accuracy(preds.subset(preds.task_id == t)) for t in np.unique(preds.task_id)}


def _bin_gaps(preds: Predictions, n_bins: int) -> tuple[np.ndarray, np.ndarray]:
    """Per non-empty bin: (|acc - conf|, count). Bins are (k/n, (k+1)/n], zero joins bin 0."""
    if n_bins < 1:
        raise DomainError("n_bins must be at least 1")
    _nonempty(preds)
    conf = preds.confidence
    correct = preds.correct.astype(np.float64)
    edges = np.arange(n_bins + 1) / n_bins
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    acc = np.bincount(idx, weights=correct, minlength=n_bins)
    cs = np.bincount(idx, weights=conf, minlength=n_bins)
    keep = counts > 0
    gaps = np.abs(acc[keep] - cs[keep]) / counts[keep]
    return gaps, counts[keep]


def ece(preds: Predictions, n_bins: int = 10) -> float:
    gaps, counts = _bin_gaps(preds, n_bins)
    return float(np.sum(gaps * counts) / np.sum(counts))


def mce(preds: Predictions, n_bins: int = 10) -> float:
    gaps, _ = _bin_gaps(preds, n_bins)
    return float(np.max(gaps))


def prior_entropy(labels: np.ndarray) -> float:
    """Entropy (nats) of the empirical binary label distribution."""
    p = float(np.mean(labels))
    return -sum(q * math.log(q) for q in (p, 1.0 - p) if q > 0)


def nll(preds: Predictions) -> float:
    _nonempty(preds)
    p_true = np.where(preds.label == 1, preds.prob_positive, 1.0 - preds.prob_positive)
    return float(np.mean(-np.log(np.clip(p_true, PROB_FLOOR, 1.0))))


def nce_from_nll(nll_value: float, h_prior: float) -> float:
    if h_prior <= 0:
        raise DomainError("normalized cross-entropy undefined for a single-class eval set")
    return (h_prior - nll_value) / h_prior


def nce(preds: Predictions) -> float:
    _nonempty(preds)
    return nce_from_nll(nll(preds), prior_entropy(preds.label))


def auroc_correctness(preds: Predictions) -> float:
    """P(conf_correct > conf_wrong) + 0.5 P(tie), via average ranks."""
    correct = preds.correct
    n_pos = int(correct.sum())
    n_neg = len(correct) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUROC needs both correct and incorrect records")
    ranks = rankdata(preds.confidence)
    return float((ranks[correct].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def auprc_correctness(preds: Predictions) -> float:
    """Step-wise average precision: sum over score thresholds of dRecall * Precision."""
    correct = preds.correct
    n_pos = int(correct.sum())
    if n_pos == 0:
        raise DomainError("AUPRC needs at least one correct record")
    order = np.argsort(-preds.confidence, kind="stable")
    conf = preds.confidence[order]
    hits = correct[order].astype(np.float64)
    tp = np.cumsum(hits)
    # a threshold is every position where the next score differs
    last = np.r_[np.flatnonzero(np.diff(conf) != 0), len(conf) - 1]
    tp_at = tp[last]
    precision = tp_at / (last + 1)
    recall = tp_at / n_pos
    d_recall = np.diff(np.r_[0.0, recall])
    return float(np.sum(d_recall * precision))


def _n_rejected(rate: float, n: int) -> int:
    # tolerance absorbs binary round-off in rate * n (0.29 * 100 = 28.999...)
    return int(math.floor(rate * n + 1e-9))


def rejection_curve(preds: Predictions, rates: Sequence[float] = DEFAULT_REJECTION_RATES
                    ) -> list[tuple[float, float]]:
    """Accuracy after withholding the floor(rate * N) least-confident records.

    Ties in confidence are broken by record order: earlier records go first.
    Rates that would withhold everything are skipped with a warning.
    """
    _nonempty(preds)
    n = len(preds)
    order = np.argsort(preds.confidence, kind="stable")
    correct = preds.correct[order]
    out = []
    for r in rates:
        if not 0 <= r < 1:
            raise DomainError(f"rejection rate {r} outside [0, 1)")
        k = _n_rejected(r, n)
        if k >= n:
            warnings.warn(f"rate {r} leaves no records; point omitted", RuntimeWarning)
            continue
        out.append((float(r), float(np.mean(correct[k:]))))
    return out


def curve_slope(curve: Sequence[tuple[float, float]], max_rate: float = 0.3) -> float:
    """Least-squares slope of retained accuracy against rejection rate up to ``max_rate``."""
    pts = np.array([p for p in curve if p[0] <= max_rate + 1e-12])
    if len(pts) < 2:
        return 0.0
    return float(np.polyfit(pts[:, 0], pts[:, 1], 1)[0])


def activation_heatmap(task_id: np.ndarray, weights: np.ndarray, n_tasks: int | None = None
                       ) -> tuple[np.ndarray, list[int]]:
    """Mean routing weight per (task, expert); tasks with no rows become NaN rows.

    Returns the matrix and the list of missing task ids.
    """
    task_id = np.asarray(task_id, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2 or len(weights) != len(task_id):
        raise ValueError("weights must be N x E and align with task ids")
    T = int(n_tasks if n_tasks is not None else (task_id.max() + 1 if len(task_id) else 0))
    out = np.full((T, weights.shape[1]), np.nan)
    missing = []
    for t in range(T):
        rows = weights[task_id == t]
        if len(rows) == 0:
            missing.append(t)
        else:
            out[t] = rows.mean(axis=0)
    return out, missing


def heatmap_from_csv(path: str | Path, n_tasks: int | None = None) -> tuple[np.ndarray, list[int]]:
    from .routing import read_routing_csv

    _, tid, w = read_routing_csv(path)
    return activation_heatmap(tid, w, n_tasks)


@dataclass
class EvalReport:
    per_task_accuracy: dict[int, float]
    average_accuracy: float
    ece: float
    mce: float
    nll: float
    nce: float
    auroc: float
    auprc: float
    rejection_curve: list[tuple[float, float]]
    activation: list[list[float]] | None = None
    n_records: int = 0
    extra: dict = field(default_factory=dict)

    METRICS = ("ece", "mce", "nll", "nce", "auroc", "auprc")
    LOWER_IS_BETTER = {"ece": True, "mce": True, "nll": True, "nce": False,
                       "auroc": False, "auprc": False}

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in self.METRICS}

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in self.METRICS:
            if math.isnan(d[k]):
                d[k] = None
        d["per_task_accuracy"] = {str(k): v for k, v in self.per_task_accuracy.items()}
        d["rejection_curve"] = [list(p) for p in self.rejection_curve]
        if self.activation is not None:
            d["activation"] = [[None if math.isnan(v) else v for v in row] for row in self.activation]
        return d

    def write(self, directory: str | Path, prefix: str = "eval") -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {"report": directory / f"{prefix}_report.json",
                 "rejection": directory / f"{prefix}_rejection_curve.csv"}
        paths["report"].write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        with paths["rejection"].open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["rejection_rate", "retained_accuracy"])
            w.writerows(self.rejection_curve)
        if self.activation is not None:
            paths["heatmap"] = directory / f"{prefix}_activation_heatmap.csv"
            with paths["heatmap"].open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["task_id", *(f"expert_{i}" for i in range(len(self.activation[0])))])
                for t, row in enumerate(self.activation):
                    w.writerow([t, *row])
        return paths


def evaluate(preds: Predictions, n_bins: int = 10, rates: Sequence[float] = DEFAULT_REJECTION_RATES,
             routing_task_id=None, routing_weights=None, n_tasks: int | None = None) -> EvalReport:
    """All metrics on one record set. AUROC/AUPRC/NCE become NaN when undefined."""
    tasks = per_task_accuracy(preds)

    def guarded(fn):
        try:
            return fn(preds)
        except DomainError:
            return float("nan")

    activation = None
    if routing_weights is not None:
        mat, _ = activation_heatmap(routing_task_id, routing_weights, n_tasks)
        activation = mat.tolist()
    return EvalReport(
        per_task_accuracy=tasks,
        average_accuracy=float(np.mean(list(tasks.values()))),
        ece=ece(preds, n_bins), mce=mce(preds, n_bins), nll=nll(preds),
        nce=guarded(nce), auroc=guarded(auroc_correctness), auprc=guarded(auprc_correctness),
        rejection_curve=rejection_curve(preds, rates), activation=activation,
        n_records=len(preds),
    )
