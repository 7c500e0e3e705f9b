"""Confusion-matrix statistics, one-vs-rest ROC AUC and RMSE."""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np


def confusion(true, pred, num_classes: int) -> np.ndarray:
    """K x K counts; rows are true classes, columns predicted classes."""
    true = np.asarray(true, dtype=np.int64).ravel()
    pred = np.asarray(pred, dtype=np.int64).ravel()
    if true.shape != pred.shape:
        raise ValueError("true and predicted labels differ in length")
    for arr in (true, pred):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"label out of range [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    return cm


def one_vs_rest(cm: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-class (TP, FP, FN, TN)."""
    cm = np.asarray(cm, dtype=np.int64)
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = cm.sum() - tp - fp - fn
    return tp, fp, fn, tn


def _ratio(num, den) -> tuple[np.ndarray, np.ndarray]:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    zero = den == 0
    return np.where(zero, 0.0, num / np.where(zero, 1, den)), zero


def _f1(p, r):
    p, r = np.asarray(p, dtype=np.float64), np.asarray(r, dtype=np.float64)
    s = p + r
    return np.where(s == 0, 0.0, 2 * p * r / np.where(s == 0, 1, s))


@dataclass
class MetricReport:
    accuracy: float = 0.0
    precision_micro: float = 0.0
    recall_micro: float = 0.0
    f1_micro: float = 0.0
    precision_macro: float = 0.0
    recall_macro: float = 0.0
    f1_macro: float = 0.0
    sensitivity: float = 0.0
    auc: float | None = None
    rmse: float | None = None
    per_class_precision: list[float] = field(default_factory=list)
    per_class_recall: list[float] = field(default_factory=list)
    per_class_f1: list[float] = field(default_factory=list)
    zero_division: list[int] = field(default_factory=list)
    averaging: str = "precision/recall/f1 micro; sensitivity = macro recall; auc macro one-vs-rest; rmse on one-hot vs probabilities"

    def to_dict(self) -> dict:
        """Serialized form; keys use hyphens (``precision-micro``, ``per-class-f1``)."""
        return {k.replace("_", "-"): v for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def basic_rates(cm) -> MetricReport:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.sum() == 0:
        raise ValueError("confusion matrix must be square and nonempty")
    tp, fp, fn, _ = one_vs_rest(cm)
    prec, pz = _ratio(tp, tp + fp)
    rec, rz = _ratio(tp, tp + fn)
    f1 = _f1(prec, rec)
    # micro: pool one-vs-rest counts across classes
    p_micro = float(_ratio(tp.sum(), tp.sum() + fp.sum())[0])
    r_micro = float(_ratio(tp.sum(), tp.sum() + fn.sum())[0])
    return MetricReport(
        accuracy=float(tp.sum() / cm.sum()),
        precision_micro=p_micro,
        recall_micro=r_micro,
        f1_micro=float(_f1(p_micro, r_micro)),
        precision_macro=float(prec.mean()),
        recall_macro=float(rec.mean()),
        f1_macro=float(f1.mean()),
        sensitivity=float(rec.mean()),
        per_class_precision=prec.tolist(),
        per_class_recall=rec.tolist(),
        per_class_f1=f1.tolist(),
        zero_division=sorted(set(np.flatnonzero(pz | rz).tolist())),
    )


def binary_auc(positive, scores) -> float:
    """Trapezoidal area under the ROC curve; tied scores form one threshold."""
    positive = np.asarray(positive, dtype=bool)
    scores = np.asarray(scores, dtype=np.float64)
    n_pos = positive.sum()
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both positive and negative samples")
    order = np.argsort(-scores, kind="stable")
    s, y = scores[order], positive[order]
    # last index of each group of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tps = np.cumsum(y)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def roc_auc(true, scores) -> float:
    """Macro one-vs-rest AUC over classes present in ``true``."""
    true = np.asarray(true, dtype=np.int64).ravel()
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != true.size:
        raise ValueError("scores must be [N, K] matching labels")
    aucs = []
    for k in range(scores.shape[1]):
        pos = true == k
        if not pos.any():
            warnings.warn(f"class {k} absent from labels; skipped in AUC", stacklevel=2)
            continue
        if pos.all():
            warnings.warn(f"class {k} has no negatives; skipped in AUC", stacklevel=2)
            continue
        aucs.append(binary_auc(pos, scores[:, k]))
    if not aucs:
        raise ValueError("no class has both positives and negatives")
    return float(np.mean(aucs))


def rmse(true_onehot, probs) -> float:
    a = np.asarray(true_onehot, dtype=np.float64)
    b = np.asarray(probs, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1
    return out


def evaluate(true, probs) -> tuple[MetricReport, np.ndarray]:
    """Full report from labels and predicted probabilities."""
    true = np.asarray(true, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    k = probs.shape[1]
    cm = confusion(true, probs.argmax(axis=1), k)
    report = basic_rates(cm)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        try:
            report.auc = roc_auc(true, probs)
        except ValueError:
            report.auc = None
    report.rmse = rmse(one_hot(true, k), probs)
    return report, cm


def confusion_csv(cm: np.ndarray) -> str:
    return "".join(",".join(str(int(v)) for v in row) + "\n" for row in cm)
