"""Confusion counts, classification ratios, ROC/AUC and mask overlap metrics."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np


def confusion_matrix(probs: Sequence[float], labels: Sequence[int], threshold: float = 0.5) -> Tuple[int, int, int, int]:
    """Return ``(tp, fp, tn, fn)`` with positive prediction meaning ``prob >= threshold``."""
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"length mismatch: {p.size} probabilities vs {y.size} labels")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary 0/1")
    pred = p >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    tn = int(np.sum(~pred & ~pos))
    fn = int(np.sum(~pred & pos))
    return tp, fp, tn, fn


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def metrics(counts: Tuple[int, int, int, int]) -> dict:
    """Accuracy, precision, recall and F1 from ``(tp, fp, tn, fn)``.

    Precision, recall and F1 are 0 when their denominator is 0.
    """
    tp, fp, tn, fn = counts
    total = tp + fp + tn + fn
    if total <= 0:
        raise ValueError("cannot compute metrics over zero samples")
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _ratio(2 * tp, 2 * tp + fp + fn)
    return {"accuracy": (tp + tn) / total, "precision": precision, "recall": recall, "f1": f1}


def roc_auc(probs: Sequence[float], labels: Sequence[int]) -> Tuple[List[Tuple[float, float]], float]:
    """ROC points by descending threshold and trapezoidal AUC.

    Equal scores form a single step, which makes the area equal the
    probability that a random positive outscores a random negative, with ties
    counting one half.

    Raises:
        ValueError: if only one class is present.
    """
    p = np.asarray(probs, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ValueError("length mismatch")
    n_pos = int(np.sum(y == 1))
    n_neg = int(np.sum(y == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-p, kind="stable")
    p, y = p[order], y[order]
    tps = np.cumsum(y == 1)
    fps = np.cumsum(y == 0)
    # last index of each run of equal scores
    ends = np.r_[np.nonzero(np.diff(p))[0], p.size - 1]
    tpr = np.r_[0.0, tps[ends] / n_pos]
    fpr = np.r_[0.0, fps[ends] / n_neg]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return list(zip(fpr.tolist(), tpr.tolist())), auc


def pixel_accuracy(pred_mask: np.ndarray, true_mask: np.ndarray, threshold: float = 0.5) -> float:
    pred = np.asarray(pred_mask) >= threshold
    truth = np.asarray(true_mask) >= 0.5
    return float(np.mean(pred == truth))


def dice(pred_mask: np.ndarray, true_mask: np.ndarray, threshold: float = 0.5) -> float:
    """``2|A & B| / (|A| + |B|)``; two empty masks count as a perfect match."""
    pred = np.asarray(pred_mask) >= threshold
    truth = np.asarray(true_mask) >= 0.5
    denom = pred.sum() + truth.sum()
    return 1.0 if denom == 0 else float(2.0 * np.sum(pred & truth) / denom)


def iou(pred_mask: np.ndarray, true_mask: np.ndarray, threshold: float = 0.5) -> float:
    pred = np.asarray(pred_mask) >= threshold
    truth = np.asarray(true_mask) >= 0.5
    union = np.sum(pred | truth)
    return 1.0 if union == 0 else float(np.sum(pred & truth) / union)


@dataclass
class EvalReport:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    threshold: float
    roc_points: List[Tuple[float, float]] = field(default_factory=list)
    auc: Optional[float] = None
    split: str = "all"
    config: dict = field(default_factory=dict)
    warnings: List[str] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    @classmethod
    def from_predictions(cls, probs, labels, threshold: float = 0.5, split: str = "all",
                         config: Optional[dict] = None) -> "EvalReport":
        counts = confusion_matrix(probs, labels, threshold)
        warnings = []
        try:
            points, auc = roc_auc(probs, labels)
        except ValueError:
            points, auc = [], None
            warnings.append("single-class evaluation set: ROC/AUC omitted")
        return cls(*counts, **metrics(counts), threshold=threshold, roc_points=points, auc=auc,
                   split=split, config=dict(config or {}), warnings=warnings)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["roc_points"] = [list(p) for p in self.roc_points]
        d["total"] = self.total
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def write(self, report_path, roc_path=None) -> None:
        """Write the JSON report and (by default beside it) ``roc.csv``."""
        report_path = Path(report_path)
        report_path.parent.mkdir(parents=True, exist_ok=True)
        report_path.write_text(self.to_json(), encoding="utf-8")
        roc_path = Path(roc_path) if roc_path else report_path.with_name("roc.csv")
        with open(roc_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["fpr", "tpr"])
            for fpr, tpr in self.roc_points:
                w.writerow([repr(fpr), repr(tpr)])

    @classmethod
    def read(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        d.pop("total", None)
        d["roc_points"] = [tuple(p) for p in d["roc_points"]]
        return cls(**d)
