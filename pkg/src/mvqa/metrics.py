"""Rank and linear correlation metrics for score series.

All computation happens in float64 regardless of model precision.  Unlike the
training losses, these refuse degenerate input: a zero-variance series has no
defined correlation and raises instead of being smoothed over.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateError, DimError


@dataclass
class MetricReport:
    srocc: float
    plcc: float
    n: int

    def to_json(self) -> str:
        return json.dumps({"srocc": self.srocc, "plcc": self.plcc, "n": self.n},
                          indent=2)

    def to_table(self) -> str:
        rows = [("metric", "value"),
                ("srocc", f"{self.srocc:+.6f}"),
                ("plcc", f"{self.plcc:+.6f}"),
                ("n", str(self.n))]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{k:<{width}}  {v}" for k, v in rows)


def rank(values) -> np.ndarray:
    """Ascending ranks starting at 1; ties get the mean of their rank span."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size < 1:
        raise DimError(f"rank expects a non-empty 1-D series, got shape {v.shape}")
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    i = 0
    sorted_v = v[order]
    while i < v.size:
        j = i
        while j + 1 < v.size and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def plcc(pred, truth) -> float:
    """Pearson linear correlation in float64."""
    x = np.asarray(pred, dtype=np.float64)
    y = np.asarray(truth, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimError(f"mismatched series shapes {x.shape} vs {y.shape}")
    if x.size < 2:
        raise DimError(f"correlation needs n >= 2, got n = {x.size}")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(np.dot(xc, xc))
    syy = float(np.dot(yc, yc))
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateError("zero-variance series has no defined correlation")
    return float(np.dot(xc, yc) / np.sqrt(sxx) / np.sqrt(syy))


def srocc(pred, truth) -> float:
    """Spearman rank correlation: Pearson correlation of the two rank series."""
    return plcc(rank(pred), rank(truth))


def evaluate(pred, truth) -> MetricReport:
    return MetricReport(srocc=srocc(pred, truth), plcc=plcc(pred, truth),
                        n=int(np.asarray(pred).size))
