"""Attribute-recognition metrics: AP-based and balanced mA, pooled Acc/Prec/Recall/F1."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class ConfusionCounts:
    tp: np.ndarray
    tn: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @classmethod
    def from_predictions(cls, pred, labels) -> "ConfusionCounts":
        pred = np.asarray(pred, dtype=bool)
        y = np.asarray(labels, dtype=bool)
        return cls(
            tp=(pred & y).sum(axis=0),
            tn=(~pred & ~y).sum(axis=0),
            fp=(pred & ~y).sum(axis=0),
            fn=(~pred & y).sum(axis=0),
        )

    def pooled(self) -> tuple[int, int, int, int]:
        return int(self.tp.sum()), int(self.tn.sum()), int(self.fp.sum()), int(self.fn.sum())


@dataclass
class MetricReport:
    mA_ap: float
    mA_balanced: float
    acc: float
    prec: float
    recall: float
    f1: float
    ap: np.ndarray = field(repr=False)
    counts: ConfusionCounts = field(repr=False)
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        return {"mA_ap": self.mA_ap, "mA_bal": self.mA_balanced, "acc": self.acc,
                "prec": self.prec, "recall": self.recall, "f1": self.f1}

    def record(self) -> str:
        return " ".join(f"{k}={v:.6f}" for k, v in self.as_dict().items())

    def table(self, names: list[str] | None = None) -> str:
        lines = ["metric      value", "----------  --------"]
        for k, v in self.as_dict().items():
            lines.append(f"{k:<10}  {v:8.4f}")
        lines.append("")
        lines.append("attribute             AP      TP    TN    FP    FN")
        for j, ap in enumerate(self.ap):
            name = names[j] if names else f"attr{j}"
            c = self.counts
            lines.append(f"{name:<18} {ap:7.4f} {c.tp[j]:5d} {c.tn[j]:5d} {c.fp[j]:5d} {c.fn[j]:5d}")
        if self.flags:
            lines.append("")
            lines.extend(f"note: {f}" for f in self.flags)
        return "\n".join(lines)


def average_precision(scores, labels) -> float | None:
    """Step-wise area under the PR curve; ``None`` when there are no positives.

    Tied scores share one threshold, so the value depends only on the
    ranking of the scores.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    npos = int(y.sum())
    if npos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    # last index of each tie group
    ends = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    group_tp = tp[ends]
    group_n = ends + 1
    new_pos = np.diff(np.r_[0, group_tp])
    precisions = []
    for k, t, n in zip(new_pos, group_tp, group_n):
        precisions.extend([int(t) / int(n)] * int(k))
    return math.fsum(precisions) / npos


def _ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def compute_metrics(scores, labels, threshold: float = 0.5) -> MetricReport:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal 2-D shapes")
    flags: list[str] = []
    n_attr = scores.shape[1]

    ap = np.zeros(n_attr)
    for j in range(n_attr):
        v = average_precision(scores[:, j], labels[:, j])
        if v is None:
            flags.append(f"attribute {j} has no positives; AP set to 0")
        else:
            ap[j] = v

    counts = ConfusionCounts.from_predictions(scores >= threshold, labels)
    bal = []
    for j in range(n_attr):
        pos = int(counts.tp[j] + counts.fn[j])
        neg = int(counts.tn[j] + counts.fp[j])
        if not pos or not neg:
            flags.append(f"attribute {j} lacks {'positives' if not pos else 'negatives'}; "
                         "undefined rate counted as 0")
        bal.append((_ratio(int(counts.tp[j]), pos) + _ratio(int(counts.tn[j]), neg)) / 2)

    tp, tn, fp, fn = counts.pooled()
    acc = _ratio(tp + tn, tp + tn + fp + fn)
    if tp + fp == 0:
        flags.append("no positive predictions; precision set to 0")
    if tp + fn == 0:
        flags.append("no positive labels; recall set to 0")
    prec = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = 2 * prec * recall / (prec + recall) if prec + recall > 0 else 0.0
    return MetricReport(
        mA_ap=math.fsum(ap) / n_attr,
        mA_balanced=math.fsum(bal) / n_attr,
        acc=acc, prec=prec, recall=recall, f1=f1,
        ap=ap, counts=counts, flags=flags,
    )
