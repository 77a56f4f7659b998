"""One-vs-rest classification metrics: ACC, PRE, SEN, SPE and rank AUC."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from . import _kernels

METRICS = ("ACC", "PRE", "SEN", "SPE", "AUC")


def auc_mann_whitney(scores, positive) -> float:
    """P(score_pos > score_neg) + 0.5 P(tie), from average ranks. NaN if one side is empty."""
    return float(_kernels.rank_auc(np.asarray(scores, dtype=np.float64), np.asarray(positive, dtype=np.bool_)))


def _ratio(num, den, empty=np.nan):
    return num / den if den > 0 else empty


@dataclass
class MetricsReport:
    class_names: list[str]
    tp: np.ndarray
    fp: np.ndarray
    tn: np.ndarray
    fn: np.ndarray
    per_class: dict[str, np.ndarray]
    macro: dict[str, float]

    def table(self) -> list[list]:
        rows = []
        for m in METRICS:
            rows.append([m, *self.per_class[m].tolist(), self.macro[m]])
        return rows

    def to_csv(self, path, model: str = "vitatt", append: bool = False) -> None:
        """Rows are (model, metric); columns are the class names plus ``avg``."""
        with open(path, "a" if append else "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if not append:
                w.writerow(["model", "metric", *self.class_names, "avg"])
            for row in self.table():
                w.writerow([model, row[0], *(f"{v:.6f}" for v in row[1:])])


def compute_metrics(labels, probs, class_names=None) -> MetricsReport:
    """Metrics from true labels and per-class scores (b, C); predictions are the argmax."""
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.asarray(probs, dtype=np.float64)
    n, C = probs.shape
    names = list(class_names) if class_names is not None else [str(c) for c in range(C)]
    pred = probs.argmax(axis=1)
    tp, fp, tn, fn = (np.zeros(C, dtype=np.int64) for _ in range(4))
    per = {m: np.full(C, np.nan) for m in METRICS}
    for c in range(C):
        t = labels == c
        p = pred == c
        tp[c] = int((t & p).sum())
        fp[c] = int((~t & p).sum())
        tn[c] = int((~t & ~p).sum())
        fn[c] = int((t & ~p).sum())
        per["ACC"][c] = (tp[c] + tn[c]) / n
        # no positive predictions: precision 0 rather than undefined
        per["PRE"][c] = _ratio(tp[c], tp[c] + fp[c], empty=0.0)
        per["SEN"][c] = _ratio(tp[c], tp[c] + fn[c])
        per["SPE"][c] = _ratio(tn[c], tn[c] + fp[c])
        per["AUC"][c] = auc_mann_whitney(probs[:, c], t)
    macro = {}
    for m in METRICS:
        v = per[m]
        ok = ~np.isnan(v)
        if not ok.all():
            missing = [names[c] for c in np.flatnonzero(~ok)]
            warnings.warn(f"{m} undefined for classes {missing}; excluded from the macro average")
        macro[m] = float(v[ok].sum() / ok.sum()) if ok.any() else float("nan")
    return MetricsReport(names, tp, fp, tn, fn, per, macro)


def accuracy(labels, probs) -> float:
    return float((np.asarray(probs).argmax(axis=1) == np.asarray(labels)).mean())
