"""Target-aware scoring, top-k selection and straight-through gathering of core behaviors."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

INVALID_SCORE = -1.0


@dataclass
class ScoreVector:
    """Importance scores in ``[0, 1]``; invalid positions hold ``INVALID_SCORE``."""

    scores: Tensor      # [..., L]
    mask: np.ndarray    # [..., L] bool


@dataclass
class CoreSelection:
    indices: np.ndarray     # [..., k] ascending positions; unused slots point at 0
    core_mask: np.ndarray   # [..., k] bool, True for the first k_eff slots
    selected: np.ndarray    # [..., L] binary mask M
    k_eff: np.ndarray       # [...]


def score_sequence(target: Tensor, behaviors: Tensor, mask: np.ndarray) -> ScoreVector:
    """``a_j = (cos(f_i, s_j) + 1) / 2`` for valid positions, ``-1`` elsewhere."""
    cos = T.cosine_scores(target, behaviors)
    a = T.mul(T.add(cos, 1.0), 0.5)
    mask = np.asarray(mask, dtype=bool)
    return ScoreVector(T.masked_fill(a, mask, INVALID_SCORE), mask)


def top_k_select(scores, k: int, mask: np.ndarray | None = None) -> CoreSelection:
    """Pick the ``min(k, valid_len)`` highest valid scores per row.

    Ties go to the smaller position. Selected positions are returned in
    ascending (temporal) order in ``k`` slots; slots past ``k_eff`` are
    masked out.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if isinstance(scores, ScoreVector):
        mask, scores = scores.mask, scores.scores
    a = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    mask = a >= 0 if mask is None else np.asarray(mask, dtype=bool)
    squeeze = a.ndim == 1
    a, mask = np.atleast_2d(a), np.atleast_2d(mask)
    n, length = a.shape

    key = np.where(mask, -a, np.inf)
    order = np.argsort(key, axis=1, kind="stable")[:, :k]
    k_eff = np.minimum(mask.sum(axis=1), k)
    slots = np.arange(order.shape[1])[None, :] < k_eff[:, None]
    chosen = np.sort(np.where(slots, order, length), axis=1)

    indices = np.zeros((n, k), dtype=np.int64)
    core_mask = np.zeros((n, k), dtype=bool)
    indices[:, :chosen.shape[1]] = np.where(chosen < length, chosen, 0)
    core_mask[:, :chosen.shape[1]] = chosen < length
    selected = np.zeros((n, length))
    rows = np.repeat(np.arange(n), k)
    selected[rows[core_mask.ravel()], indices[core_mask]] = 1.0
    if squeeze:
        return CoreSelection(indices[0], core_mask[0], selected[0], k_eff[0])
    return CoreSelection(indices, core_mask, selected, k_eff)


def ste_gather(behaviors: Tensor, scores: ScoreVector, sel: CoreSelection,
               frozen_offset: np.ndarray | None = None) -> Tensor:
    """``Gather(S * (sg[M - A] + A), I_k)`` with padded slots zeroed.

    The forward value of the multiplier is exactly ``M``, so the output rows
    are copies of the selected behaviors; the gradient reaches the selected
    scores through the ``+ A`` term.

    ``frozen_offset`` replaces ``sg[M - A]`` by a fixed array. Evaluating
    with the offset taken at a base point gives a smooth function whose
    ordinary derivative is what the straight-through backward computes,
    which is what gradient checks compare against.
    """
    a = scores.scores
    if frozen_offset is None:
        mult = T.straight_through(sel.selected, a)
    else:
        mult = T.add(T.constant(frozen_offset, a.dtype), a)
    weighted = T.mul(behaviors, T.reshape(mult, mult.shape + (1,)))
    core = T.gather_rows(weighted, sel.indices)
    keep = sel.core_mask[..., None].astype(behaviors.dtype)
    return T.mul(core, keep)
