"""Binary classification metrics: confusion counts, rates, ROC/AUC, reports.

All metric functions are pure. Undefined ratios (empty denominators) surface
as ``None`` and print as ``n/a``; they are never silently reported as 0.
The positive class is label 1 throughout.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .optim import categorical_cross_entropy
from .tensor import no_grad


@dataclass(frozen=True)
class ConfusionMatrix:
    tn: int
    fp: int
    fn: int
    tp: int

    def __post_init__(self):
        if min(self.tn, self.fp, self.fn, self.tp) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tn + self.fp + self.fn + self.tp


def confusion(pred_labels, true_labels) -> ConfusionMatrix:
    """Count the four quadrants; labels must be binary (0 negative, 1 positive)."""
    pred = np.asarray(pred_labels)
    true = np.asarray(true_labels)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError(f"label arrays must be equal-length 1-d, got {pred.shape} and {true.shape}")
    for name, arr in (("pred", pred), ("true", true)):
        if not np.isin(arr, (0, 1)).all():
            raise ValueError(f"{name} labels must be binary 0/1")
    return ConfusionMatrix(
        tn=int(((pred == 0) & (true == 0)).sum()),
        fp=int(((pred == 1) & (true == 0)).sum()),
        fn=int(((pred == 0) & (true == 1)).sum()),
        tp=int(((pred == 1) & (true == 1)).sum()),
    )


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ValueError("accuracy undefined for an empty confusion matrix")
    return (cm.tn + cm.tp) / cm.total


def precision(cm: ConfusionMatrix) -> float | None:
    denom = cm.tp + cm.fp
    return None if denom == 0 else cm.tp / denom


def recall(cm: ConfusionMatrix) -> float | None:
    denom = cm.tp + cm.fn
    return None if denom == 0 else cm.tp / denom


def f1(cm: ConfusionMatrix) -> float | None:
    p, r = precision(cm), recall(cm)
    if p is None or r is None or p + r == 0.0:
        return None
    return 2.0 * p * r / (p + r)


@dataclass(frozen=True)
class RocCurve:
    """Threshold-sweep operating points, from (0,0) to (1,1).

    ``thresholds[i]`` is the lowest score still classified positive at point
    i; the leading (0,0) point carries +inf (nothing classified positive).
    """

    fpr: tuple
    tpr: tuple
    thresholds: tuple

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.fpr, self.tpr))


def roc_auc(scores, true_labels) -> tuple[RocCurve, float]:
    """Sweep thresholds over the scores and integrate the curve.

    Equal scores are grouped into a single operating point, which makes the
    trapezoidal area equal the pairwise concordance statistic
    (#concordant + 0.5*#ties) / (P*N) exactly.
    """
    s = np.asarray(scores, dtype=float)
    y = np.asarray(true_labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores and labels must be equal-length 1-d, got {s.shape} and {y.shape}")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("true labels must be binary 0/1")
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos == 0 or neg == 0:
        raise ValueError("ROC needs at least one positive and one negative sample")

    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    cum_tp = np.cumsum(y_sorted == 1)
    cum_fp = np.cumsum(y_sorted == 0)
    # one operating point per distinct score value
    boundary = np.nonzero(np.append(s_sorted[1:] != s_sorted[:-1], True))[0]

    fpr = [0.0]
    tpr = [0.0]
    thresholds = [np.inf]
    for i in boundary:
        fpr.append(float(cum_fp[i]) / neg)
        tpr.append(float(cum_tp[i]) / pos)
        thresholds.append(float(s_sorted[i]))

    auc = 0.0
    for i in range(1, len(fpr)):
        auc += (fpr[i] - fpr[i - 1]) * (tpr[i] + tpr[i - 1]) / 2.0
    return RocCurve(tuple(fpr), tuple(tpr), tuple(thresholds)), auc


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float | None
    recall: float | None
    f1: float | None
    auc: float
    loss: float


def evaluate(model, dataset, batch_size: int = 128
             ) -> tuple[MetricsReport, ConfusionMatrix, RocCurve]:
    """Score a binary classifier (anything with ``forward``) on (X, Y) data.

    Predictions come from the argmax of the class probabilities; the
    positive-class probability drives the ROC sweep; the loss is the mean
    cross-entropy over the whole set.
    """
    x, y = dataset
    x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    if len(x) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if y.ndim != 2 or y.shape[1] != 2:
        raise ValueError(f"targets must be one-hot [N,2], got {y.shape}")

    probs = np.empty_like(y)
    total_loss = 0.0
    with no_grad():
        for start in range(0, len(x), batch_size):
            xb, yb = x[start:start + batch_size], y[start:start + batch_size]
            p = model.forward(xb, train=False).data
            loss, _ = categorical_cross_entropy(p, yb)
            probs[start:start + batch_size] = p
            total_loss += loss * len(xb)

    pred = probs.argmax(axis=1)
    true = y.argmax(axis=1)
    cm = confusion(pred, true)
    curve, auc = roc_auc(probs[:, 1], true)
    report = MetricsReport(
        accuracy=accuracy(cm), precision=precision(cm), recall=recall(cm),
        f1=f1(cm), auc=auc, loss=total_loss / len(x))
    return report, cm, curve


# ---------------------------------------------------------------------------
# formatting and export

def fmt_pct(value: float | None) -> str:
    """Fraction -> percent with two decimals, or 'n/a' when undefined."""
    return "n/a" if value is None else f"{100.0 * value:.2f}"


def report_lines(report: MetricsReport, cm: ConfusionMatrix) -> list[str]:
    def show(v):
        return "n/a" if v is None else repr(float(v))

    fields = asdict(report)
    lines = [f"{key}={show(fields[key])}" for key in
             ("accuracy", "precision", "recall", "f1", "auc", "loss")]
    lines += [f"{key}={getattr(cm, key)}" for key in ("tn", "fp", "fn", "tp")]
    return lines


def write_report_text(report: MetricsReport, cm: ConfusionMatrix, path) -> None:
    with open(path, "w") as f:
        f.write("\n".join(report_lines(report, cm)) + "\n")


def write_report_json(report: MetricsReport, cm: ConfusionMatrix, path) -> None:
    payload = asdict(report)
    payload["counts"] = {"tn": cm.tn, "fp": cm.fp, "fn": cm.fn, "tp": cm.tp}
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def read_report_json(path) -> tuple[MetricsReport, ConfusionMatrix]:
    """Inverse of :func:`write_report_json`; floats round-trip exactly."""
    with open(path) as f:
        payload = json.load(f)
    cm = ConfusionMatrix(**payload["counts"])
    report = MetricsReport(**{k: payload[k] for k in
                              ("accuracy", "precision", "recall", "f1", "auc", "loss")})
    return report, cm


def write_roc_csv(curve: RocCurve, path) -> None:
    with open(path, "w") as f:
        f.write("fpr,tpr\n")
        for x, y in curve.points():
            f.write(f"{x!r},{y!r}\n")
