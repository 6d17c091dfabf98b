"""Segmentation confusion metrics and terrain RMSE."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class SegMetrics:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    iou: float
    f1: float
    # names of metrics whose denominator was zero (reported as 0)
    undefined: tuple = field(default=())

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, tn: int) -> "SegMetrics":
        undefined = []

        def ratio(name, num, den):
            if den == 0:
                undefined.append(name)
                return 0.0
            return num / den

        p = ratio("precision", tp, tp + fp)
        r = ratio("recall", tp, tp + fn)
        iou = ratio("iou", tp, tp + fp + fn)
        f1 = ratio("f1", 2.0 * p * r, p + r)
        return cls(int(tp), int(fp), int(fn), int(tn), p, r, iou, f1, tuple(undefined))

    def __add__(self, other: "SegMetrics") -> "SegMetrics":
        return SegMetrics.from_counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


def compute_metrics(predicted, labels) -> SegMetrics:
    """``predicted`` is a boolean mask (or index array) over the labelled points."""
    labels = np.asarray(labels)
    if np.any(labels < 0):
        raise ValueError("every point must be labelled")
    truth = labels.astype(bool)
    pred = np.asarray(predicted)
    if pred.dtype != bool:
        mask = np.zeros(len(truth), dtype=bool)
        mask[pred.astype(np.int64)] = True
        pred = mask
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    tn = int(np.sum(~pred & ~truth))
    return SegMetrics.from_counts(tp, fp, fn, tn)


def pooled(metrics) -> SegMetrics:
    total = SegMetrics.from_counts(0, 0, 0, 0)
    for m in metrics:
        total = total + m
    return total


def rmse(estimates, truth) -> float:
    e = np.asarray(estimates, dtype=float).ravel() - np.asarray(truth, dtype=float).ravel()
    if len(e) == 0:
        raise ValueError("RMSE needs at least one sample")
    return math.sqrt(float(np.mean(e * e)))


def rmse_terrain(query, samples) -> float:
    """RMSE of ``query(x, y)`` (vectorised) against (n, 3) truth samples ``x y z``."""
    s = np.asarray(samples, dtype=float).reshape(-1, 3)
    return rmse(query(s[:, 0], s[:, 1]), s[:, 2])
