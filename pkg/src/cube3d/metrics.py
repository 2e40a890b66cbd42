"""Multiclass evaluation: confusion matrix, precision/recall/F1, and
one-vs-rest ROC with per-class, micro and macro AUC.

AUC uses a descending threshold sweep with tie groups collapsed to single
curve points and trapezoidal integration, which equals the pairwise
probability P(score+ > score-) + 0.5 * P(tie) exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import CLASS_NAMES
from .errors import ValidationError


@dataclass
class ConfusionMatrix:
    """Raw counts, rows = true class, columns = predicted class."""

    counts: np.ndarray

    @classmethod
    def from_labels(cls, true_labels, predicted_labels, num_classes):
        t = np.asarray(true_labels, dtype=np.int64)
        p = np.asarray(predicted_labels, dtype=np.int64)
        if t.shape != p.shape or t.ndim != 1:
            raise ValidationError(
                f"label lists misaligned: {t.shape} vs {p.shape}"
            )
        if t.size and (
            t.min() < 0 or t.max() >= num_classes or p.min() < 0 or p.max() >= num_classes
        ):
            raise ValidationError(f"label outside 0..{num_classes - 1}")
        counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        np.add.at(counts, (t, p), 1)
        return cls(counts)

    @property
    def num_classes(self):
        return self.counts.shape[0]

    def support(self):
        return self.counts.sum(axis=1)

    def normalized(self):
        """Row-normalized view; rows with zero support stay all-zero."""
        support = self.support().astype(np.float64)
        out = np.zeros_like(self.counts, dtype=np.float64)
        nz = support > 0
        out[nz] = self.counts[nz] / support[nz, None]
        return out

    def zero_support_classes(self):
        return [int(i) for i in np.flatnonzero(self.support() == 0)]

    def average_accuracy(self):
        return average_accuracy(self.normalized())


def average_accuracy(normalized_matrix):
    """Unweighted mean of the normalized confusion-matrix diagonal."""
    m = np.asarray(normalized_matrix, dtype=np.float64)
    return float(np.mean(np.diag(m)))


@dataclass
class ClassScores:
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    undefined: np.ndarray  # classes where a zero denominator forced a 0

    def averages(self):
        return (
            float(self.precision.mean()),
            float(self.recall.mean()),
            float(self.f1.mean()),
        )


def precision_recall_f1(cm):
    """Per-class precision, recall and F1 from a confusion matrix.

    Zero denominators yield 0 and set the class's ``undefined`` flag; the
    averages are plain unweighted means over all classes.
    """
    counts = cm.counts.astype(np.float64)
    diag = np.diag(counts)
    pred_total = counts.sum(axis=0)
    true_total = counts.sum(axis=1)
    precision = np.divide(
        diag, pred_total, out=np.zeros_like(diag), where=pred_total > 0
    )
    recall = np.divide(
        diag, true_total, out=np.zeros_like(diag), where=true_total > 0
    )
    pr = precision + recall
    f1 = np.divide(
        2 * precision * recall, pr, out=np.zeros_like(diag), where=pr > 0
    )
    undefined = (pred_total == 0) | (true_total == 0)
    return ClassScores(precision, recall, f1, undefined)


@dataclass
class RocCurve:
    """One-vs-rest ROC sweep: (fpr, tpr) points and the trapezoid AUC."""

    fpr: np.ndarray
    tpr: np.ndarray
    auc: float
    n_pos: int
    n_neg: int

    @property
    def defined(self):
        return self.n_pos > 0 and self.n_neg > 0


def binary_roc(scores, positive):
    """ROC of one binary problem; ties are collapsed into single points."""
    s = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positive, dtype=bool)
    if s.shape != pos.shape or s.ndim != 1:
        raise ValidationError(f"scores/positives misaligned: {s.shape} vs {pos.shape}")
    n_pos = int(pos.sum())
    n_neg = int(s.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        return RocCurve(np.empty(0), np.empty(0), float("nan"), n_pos, n_neg)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    p_sorted = pos[order].astype(np.int64)
    # last index of each tie group
    ends = np.flatnonzero(np.diff(s_sorted))
    ends = np.r_[ends, s_sorted.size - 1]
    tp = np.cumsum(p_sorted)[ends]
    fp = np.cumsum(1 - p_sorted)[ends]
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) * 0.5))
    return RocCurve(fpr, tpr, auc, n_pos, n_neg)


def _check_scores(scores, true_labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(true_labels, dtype=np.int64)
    if s.ndim != 2 or y.shape != (s.shape[0],):
        raise ValidationError(
            f"scores {s.shape} and labels {y.shape} misaligned"
        )
    if y.size and (y.min() < 0 or y.max() >= s.shape[1]):
        raise ValidationError(f"label outside 0..{s.shape[1] - 1}")
    return s, y


def roc_auc(scores, true_labels):
    """One RocCurve per class, one-vs-rest.  Classes with no positive or
    no negative samples come back undefined (NaN AUC, empty curve)."""
    s, y = _check_scores(scores, true_labels)
    return [binary_roc(s[:, c], y == c) for c in range(s.shape[1])]


def micro_macro_auc(scores, true_labels, curves=None):
    """Macro = unweighted mean of the defined per-class AUCs; micro = AUC
    of all one-vs-rest (score, is-positive) pairs pooled together."""
    s, y = _check_scores(scores, true_labels)
    if curves is None:
        curves = roc_auc(s, y)
    defined = [c.auc for c in curves if c.defined]
    if not defined:
        raise ValidationError("macro AUC undefined: no class has both outcomes")
    macro = float(np.mean(defined))
    onehot = np.zeros_like(s, dtype=bool)
    onehot[np.arange(y.size), y] = True
    micro = binary_roc(s.ravel(), onehot.ravel()).auc
    return micro, macro


@dataclass
class MetricsReport:
    """Everything the evaluate command emits, in one bundle."""

    confusion: ConfusionMatrix
    class_scores: ClassScores
    curves: list
    micro_auc: float
    macro_auc: float
    average_accuracy: float
    class_names: tuple

    def to_dict(self):
        p_avg, r_avg, f_avg = self.class_scores.averages()
        per_class = {}
        for i, name in enumerate(self.class_names):
            curve = self.curves[i]
            per_class[name] = {
                "precision": float(self.class_scores.precision[i]),
                "recall": float(self.class_scores.recall[i]),
                "f1": float(self.class_scores.f1[i]),
                "undefined": bool(self.class_scores.undefined[i]),
                "auc": float(curve.auc) if curve.defined else None,
                "support": int(self.confusion.support()[i]),
            }
        return {
            "average_accuracy": self.average_accuracy,
            "micro_auc": self.micro_auc,
            "macro_auc": self.macro_auc,
            "precision_avg": p_avg,
            "recall_avg": r_avg,
            "f1_avg": f_avg,
            "per_class": per_class,
        }


def majority_vote(labels, num_classes):
    """Most frequent label; ties go to the smallest index."""
    counts = np.bincount(np.asarray(labels, dtype=np.int64), minlength=num_classes)
    return int(counts.argmax())


def aggregate_per_video(video_ids, true_labels, scores):
    """Collapse per-cube rows into one row per video.

    The video's true and predicted labels are majority votes over its
    cubes; its score row is the mean of the cube rows (kept only so the
    ROC sweep stays defined at this granularity).
    """
    s, y = _check_scores(scores, true_labels)
    num_classes = s.shape[1]
    order = {}
    for vid in video_ids:
        order.setdefault(vid, len(order))
    groups = {vid: [] for vid in order}
    for i, vid in enumerate(video_ids):
        groups[vid].append(i)
    videos = sorted(order, key=order.get)
    agg_true = np.array(
        [majority_vote(y[groups[v]], num_classes) for v in videos], dtype=np.int64
    )
    agg_pred = np.array(
        [majority_vote(s[groups[v]].argmax(axis=1), num_classes) for v in videos],
        dtype=np.int64,
    )
    agg_scores = np.stack([s[groups[v]].mean(axis=0) for v in videos])
    return agg_true, agg_scores, agg_pred


def build_report(true_labels, scores, num_classes=None, predicted=None):
    """Assemble the full report from aligned labels and score rows.

    ``predicted`` overrides the default argmax-of-scores labeling (used by
    the majority-vote per-video mode).
    """
    s, y = _check_scores(scores, true_labels)
    if num_classes is None:
        num_classes = s.shape[1]
    if predicted is None:
        predicted = s.argmax(axis=1)
    cm = ConfusionMatrix.from_labels(y, predicted, num_classes)
    curves = roc_auc(s, y)
    micro, macro = micro_macro_auc(s, y, curves)
    names = tuple(CLASS_NAMES[:num_classes]) if num_classes <= len(CLASS_NAMES) else \
        tuple(f"class_{i}" for i in range(num_classes))
    return MetricsReport(
        confusion=cm,
        class_scores=precision_recall_f1(cm),
        curves=curves,
        micro_auc=micro,
        macro_auc=macro,
        average_accuracy=cm.average_accuracy(),
        class_names=names,
    )


def write_metrics_files(report, out_dir):
    """Write metrics.json, confusion.csv and one roc_<class>.csv per class."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2)
        fh.write("\n")
    names = report.class_names
    with open(out_dir / "confusion.csv", "w") as fh:
        fh.write("# raw counts, rows=true, columns=predicted\n")
        fh.write("true\\pred," + ",".join(names) + "\n")
        for i, name in enumerate(names):
            row = ",".join(str(int(v)) for v in report.confusion.counts[i])
            fh.write(f"{name},{row}\n")
        fh.write("# row-normalized\n")
        fh.write("true\\pred," + ",".join(names) + "\n")
        normalized = report.confusion.normalized()
        for i, name in enumerate(names):
            row = ",".join(f"{v:.6f}" for v in normalized[i])
            fh.write(f"{name},{row}\n")
    for i, name in enumerate(names):
        curve = report.curves[i]
        with open(out_dir / f"roc_{name}.csv", "w") as fh:
            fh.write("fpr,tpr\n")
            for f, t in zip(curve.fpr, curve.tpr):
                fh.write(f"{f:.6f},{t:.6f}\n")
