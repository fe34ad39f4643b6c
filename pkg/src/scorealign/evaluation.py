"""Multi-label note evaluation: precision/recall, PR curves, average
precision, polyphony splits, and MIREX-style frame metrics.

Predictions and truths are per-point note sets, given either as iterables
of sets of MIDI numbers or as ``(n_points, 128)`` boolean arrays. Counts are
pooled over all points before any ratio is taken.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

N_NOTES = 128


def as_label_matrix(sets) -> np.ndarray:
    if isinstance(sets, np.ndarray) and sets.ndim == 2:
        return sets.astype(bool, copy=False)
    sets = list(sets)
    out = np.zeros((len(sets), N_NOTES), dtype=bool)
    for i, notes in enumerate(sets):
        if isinstance(notes, np.ndarray) and notes.dtype == bool:
            out[i] = notes
        else:
            out[i, list(notes)] = True
    return out


@dataclass(frozen=True)
class PrecisionRecall:
    precision: float
    recall: float
    # True when nothing was predicted and precision was defined as 1
    no_predictions: bool = False

    @property
    def f1(self) -> float:
        total = self.precision + self.recall
        return 0.0 if total == 0 else 2 * self.precision * self.recall / total


def precision_recall(predictions, truths) -> PrecisionRecall:
    pred = as_label_matrix(predictions)
    true = as_label_matrix(truths)
    if pred.shape != true.shape:
        raise ValueError(f"{len(pred)} prediction rows vs {len(true)} truth rows")
    n_true = int(true.sum())
    if n_true == 0:
        raise ValueError("no ground-truth labels; recall is undefined")
    correct = int(np.count_nonzero(pred & true))
    n_pred = int(pred.sum())
    if n_pred == 0:
        return PrecisionRecall(1.0, 0.0, True)
    return PrecisionRecall(correct / n_pred, correct / n_true)


def counts_at_thresholds(scores, truths, thresholds):
    """``(true_positives, predicted, n_true)`` for the rule ``score > c`` at
    every threshold ``c``."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths, dtype=bool)
    if scores.shape != truths.shape:
        raise ValueError("scores and truths must share a shape")
    thresholds = np.asarray(thresholds, dtype=np.float64)
    all_sorted = np.sort(scores, axis=None)
    pos_sorted = np.sort(scores[truths], axis=None)
    npred = all_sorted.size - np.searchsorted(all_sorted, thresholds, side="right")
    tp = pos_sorted.size - np.searchsorted(pos_sorted, thresholds, side="right")
    return tp, npred, int(pos_sorted.size)


def f1_score(tp, npred, ntrue) -> np.ndarray:
    tp = np.asarray(tp, dtype=np.float64)
    npred = np.asarray(npred, dtype=np.float64)
    precision = np.where(npred > 0, tp / np.maximum(npred, 1), 1.0)
    recall = tp / ntrue
    total = precision + recall
    return np.where(total > 0, 2 * precision * recall / np.where(total > 0, total, 1), 0.0)


def ap_threshold_grid(scores, size: int = 512) -> np.ndarray:
    """Evenly spaced thresholds from just below the minimum score (predict
    everything) to the maximum (predict nothing)."""
    scores = np.asarray(scores, dtype=np.float64)
    lo = np.nextafter(float(scores.min()), -np.inf)
    return np.linspace(lo, float(scores.max()), size)


def average_precision(precision, recall) -> float:
    """Step integral of precision over recall, curve points ordered by
    increasing recall (best precision first within a recall level)."""
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    order = np.lexsort((-precision, recall))
    r = recall[order]
    p = precision[order]
    steps = np.diff(np.r_[0.0, r])
    return float(np.sum(steps * p))


@dataclass
class PRCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    average_precision: float

    def rows(self):
        return list(zip(self.thresholds.tolist(), self.precision.tolist(),
                        self.recall.tolist()))


def pr_curve_and_ap(scores, truths, thresholds=None, grid_size: int = 512) -> PRCurve:
    scores = np.asarray(scores, dtype=np.float64)
    truths = as_label_matrix(truths) if not isinstance(truths, np.ndarray) else truths.astype(bool)
    if thresholds is None:
        thresholds = ap_threshold_grid(scores, grid_size)
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.size < 2:
        raise ValueError("need at least two thresholds")
    tp, npred, ntrue = counts_at_thresholds(scores, truths, thresholds)
    if ntrue == 0:
        raise ValueError("no ground-truth labels; recall is undefined")
    precision = np.where(npred > 0, tp / np.maximum(npred, 1), 1.0)
    recall = tp / ntrue
    return PRCurve(thresholds, precision, recall, average_precision(precision, recall))


def polyphony_mask(truths, k: int) -> np.ndarray:
    if k < 0:
        raise ValueError("polyphony count must be >= 0")
    return as_label_matrix(truths).sum(axis=1) == k


def polyphony_subset(dataset, k: int):
    """Points whose truth vector has exactly ``k`` notes.

    ``dataset`` is a truth matrix, a ``(scores, truths)`` pair, or a segment
    set exposing ``.labels`` and ``.sub``.
    """
    if hasattr(dataset, "labels") and hasattr(dataset, "sub"):
        return dataset.sub(polyphony_mask(dataset.labels, k))
    if isinstance(dataset, tuple):
        scores, truths = dataset
        mask = polyphony_mask(truths, k)
        return np.asarray(scores)[mask], as_label_matrix(truths)[mask]
    truths = as_label_matrix(dataset)
    return truths[polyphony_mask(truths, k)]


@dataclass(frozen=True)
class MirexMetrics:
    acc: float
    e_tot: float
    e_sub: float
    e_miss: float
    e_fa: float


def mirex_metrics(predictions, truths) -> MirexMetrics:
    """Frame-level accuracy and the substitution/miss/false-alarm error
    decomposition, all normalized by the total reference count."""
    pred = as_label_matrix(predictions)
    true = as_label_matrix(truths)
    if pred.shape != true.shape:
        raise ValueError(f"{len(pred)} prediction rows vs {len(true)} truth rows")
    n_ref = true.sum(axis=1).astype(np.int64)
    n_sys = pred.sum(axis=1).astype(np.int64)
    n_corr = np.count_nonzero(pred & true, axis=1).astype(np.int64)
    total_ref = int(n_ref.sum())
    if total_ref == 0:
        raise ValueError("no reference notes; MIREX metrics are undefined")
    denom = int(np.sum(n_ref + n_sys - n_corr))
    acc = n_corr.sum() / denom if denom else 0.0
    e_sub = int(np.sum(np.minimum(n_ref, n_sys) - n_corr)) / total_ref
    e_miss = int(np.sum(np.maximum(0, n_ref - n_sys))) / total_ref
    e_fa = int(np.sum(np.maximum(0, n_sys - n_ref))) / total_ref
    return MirexMetrics(float(acc), e_sub + e_miss + e_fa, e_sub, e_miss, e_fa)


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    average_precision: float
    threshold: float
    subset: str = "All"
    points: int = 0
    pr_curve: list = field(default_factory=list)
    mirex: Optional[MirexMetrics] = None
    no_predictions: bool = False

    def summary_text(self) -> str:
        lines = [
            f"subset: {self.subset}",
            f"points: {self.points}",
            f"threshold: {self.threshold:.6g}",
            f"precision: {self.precision:.4f}",
            f"recall: {self.recall:.4f}",
            f"f1: {self.f1:.4f}",
            f"average_precision: {self.average_precision:.4f}",
        ]
        if self.no_predictions:
            lines.append("note: no predictions at this threshold; precision set to 1")
        if self.mirex is not None:
            m = self.mirex
            lines += [
                "mirex:",
                f"  acc: {m.acc:.4f}",
                f"  e_tot: {m.e_tot:.4f}",
                f"  e_sub: {m.e_sub:.4f}",
                f"  e_miss: {m.e_miss:.4f}",
                f"  e_fa: {m.e_fa:.4f}",
            ]
        return "\n".join(lines) + "\n"


def subset_name(k: Optional[int]) -> str:
    if k is None:
        return "All"
    return {1: "Mono", 3: "Poly3"}.get(k, f"Poly{k}")


def evaluate(scores, truths, threshold: float, grid_size: int = 512,
             subset: Optional[int] = None) -> EvalReport:
    """Full report for model scores at a fixed decision threshold."""
    scores = np.asarray(scores, dtype=np.float64)
    truths = as_label_matrix(truths)
    if subset is not None:
        scores, truths = polyphony_subset((scores, truths), subset)
    if scores.shape[0] == 0:
        raise ValueError(f"subset {subset_name(subset)} is empty")
    pred = scores > threshold
    pr = precision_recall(pred, truths)
    curve = pr_curve_and_ap(scores, truths, grid_size=grid_size)
    mirex = mirex_metrics(pred, truths)
    return EvalReport(
        precision=pr.precision,
        recall=pr.recall,
        f1=pr.f1,
        average_precision=curve.average_precision,
        threshold=float(threshold),
        subset=subset_name(subset),
        points=int(scores.shape[0]),
        pr_curve=curve.rows(),
        mirex=mirex,
        no_predictions=pr.no_predictions,
    )


def write_report_csv(report: EvalReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "precision", "recall"])
        for c, p, r in report.pr_curve:
            writer.writerow([repr(c), repr(p), repr(r)])


def write_pr_curve(report: EvalReport, path) -> None:
    """Plot-ready two-column ``recall precision`` text file."""
    with open(path, "w") as fh:
        for _c, p, r in sorted(report.pr_curve, key=lambda row: (row[2], -row[1])):
            fh.write(f"{r:.6f} {p:.6f}\n")
