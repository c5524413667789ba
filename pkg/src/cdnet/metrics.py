"""AUC, GAUC and LogLoss."""

from __future__ import annotations

from typing import Iterable, NamedTuple

import numpy as np

CLIP = 1e-7


class UndefinedMetricError(ValueError):
    """The metric needs both classes to be present."""


class EvalRecord(NamedTuple):
    user_id: int
    score: float
    label: int


def unpack(records: Iterable[EvalRecord]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Columns ``(users, scores, labels)`` of a record list."""
    recs = list(records)
    return (np.array([r.user_id for r in recs]), np.array([r.score for r in recs], dtype=np.float64),
            np.array([r.label for r in recs], dtype=np.int64))


def _avg_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    # start index of each run of equal values
    starts = np.flatnonzero(np.r_[True, xs[1:] != xs[:-1]])
    ends = np.r_[starts[1:], len(xs)]
    avg = (starts + ends + 1) / 2.0  # 1-based mean rank of the run
    ranks = np.empty(len(x))
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def auc(scores, labels) -> float:
    """Probability that a random positive outranks a random negative (ties count 1/2)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    r = _avg_ranks(s)
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def gauc(users, scores, labels) -> float:
    """Impression-weighted mean of per-user AUC over users with both classes."""
    users = np.asarray(users)
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(np.int64)
    order = np.argsort(users, kind="mergesort")
    bounds = np.flatnonzero(np.diff(users[order])) + 1
    total, weight = 0.0, 0
    for rows in np.split(order, bounds):
        pos = y[rows].sum()
        if pos == 0 or pos == len(rows):
            continue
        total += len(rows) * auc(s[rows], y[rows])
        weight += len(rows)
    if weight == 0:
        raise UndefinedMetricError("GAUC needs at least one user with both classes")
    return total / weight


def logloss(scores, labels) -> float:
    p = np.clip(np.asarray(scores, dtype=np.float64), CLIP, 1 - CLIP)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise UndefinedMetricError("LogLoss of an empty set")
    return float(-(y * np.log(p) + (1 - y) * np.log(1 - p)).mean())


def evaluate_all(users, scores, labels) -> dict[str, float]:
    out = {"auc": float("nan"), "gauc": float("nan"), "logloss": logloss(scores, labels)}
    try:
        out["auc"] = auc(scores, labels)
        out["gauc"] = gauc(users, scores, labels)
    except UndefinedMetricError:
        pass
    return out
