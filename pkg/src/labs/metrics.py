"""Precision@k, Recall@k and F1@k for ranked multi-label predictions.

Averages are accumulated as exact fractions and rounded once, so results do
not depend on summation order.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

KS = (1, 2, 3)


class MetricError(ValueError):
    pass


def top_k(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k highest scores per row; ties go to the lower index."""
    scores = np.asarray(scores)
    order = np.argsort(-scores, axis=-1, kind="stable")
    return order[..., :k]


def _hits(scores: np.ndarray, true_sets: Sequence[Iterable[int]], k: int) -> list[tuple[int, int]]:
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    if scores.shape[0] == 0:
        raise MetricError("empty evaluation set")
    if scores.shape[0] != len(true_sets):
        raise MetricError(f"{scores.shape[0]} score rows but {len(true_sets)} true sets")
    if not 1 <= k <= scores.shape[1]:
        raise MetricError(f"k={k} outside 1..{scores.shape[1]}")
    out = []
    for row, truth in zip(top_k(scores, k), true_sets):
        truth = set(truth)
        if not truth:
            raise MetricError("true label set is empty")
        out.append((sum(1 for j in row if j in truth), len(truth)))
    return out


def _precision(hits, k) -> Fraction:
    return Fraction(sum(tp for tp, _ in hits), k * len(hits))


def _recall(hits) -> Fraction:
    return sum((Fraction(tp, n) for tp, n in hits), Fraction(0)) / len(hits)


def _f1(p: Fraction, r: Fraction) -> Fraction:
    return Fraction(0) if p + r == 0 else 2 * p * r / (p + r)


def precision_at_k(scores, true_sets, k: int) -> float:
    """Mean over examples of |top-k ∩ truth| / k."""
    return float(_precision(_hits(scores, true_sets, k), k))


def recall_at_k(scores, true_sets, k: int) -> float:
    """Mean over examples of |top-k ∩ truth| / |truth|."""
    return float(_recall(_hits(scores, true_sets, k)))


def f1_at_k(p: float, r: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    if not (0 <= p <= 1 and 0 <= r <= 1):
        raise MetricError(f"precision/recall must lie in [0, 1], got {p}, {r}")
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


@dataclass(frozen=True)
class MetricReport:
    precision: dict[int, float]
    recall: dict[int, float]
    f1: dict[int, float]

    ROWS = tuple(f"{name}@{k}" for name in ("Precision", "Recall", "F1") for k in KS)

    def to_dict(self) -> dict[str, float]:
        out = {}
        for name, table in (("Precision", self.precision), ("Recall", self.recall), ("F1", self.f1)):
            for k in sorted(table):
                out[f"{name}@{k}"] = table[k]
        return out

    @classmethod
    def from_dict(cls, d: dict[str, float]) -> "MetricReport":
        tables = {"Precision": {}, "Recall": {}, "F1": {}}
        for key, value in d.items():
            name, k = key.split("@")
            tables[name][int(k)] = value
        return cls(tables["Precision"], tables["Recall"], tables["F1"])


def evaluate(scores, true_sets, ks: Sequence[int] = KS) -> MetricReport:
    """Report P/R/F1 at each k; F1 is taken from the aggregated P and R."""
    precision, recall, f1 = {}, {}, {}
    for k in ks:
        hits = _hits(scores, true_sets, k)
        p, r = _precision(hits, k), _recall(hits)
        precision[k], recall[k], f1[k] = float(p), float(r), float(_f1(p, r))
    return MetricReport(precision, recall, f1)


def true_sets_from_targets(targets: np.ndarray) -> list[set[int]]:
    return [set(np.flatnonzero(row).tolist()) for row in np.asarray(targets)]
