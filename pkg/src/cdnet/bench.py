"""Attention cost of the selected-token stack versus full-sequence interaction.

Multiply-accumulates are counted from the matmuls actually executed by one
attention layer, so they are exact; wall time is measured alongside and is
informational only.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .interaction import MultiHeadAttention
from .tensor import Tensor

QUADRATIC_TAGS = ("qk", "av")


def mha_macs_formula(tokens: int, d: int) -> int:
    """Closed-form multiply-adds of one attention layer: ``2 T^2 d + 4 T d^2``."""
    return 2 * tokens * tokens * d + 4 * tokens * d * d


@dataclass
class AttentionCost:
    tokens: int
    quadratic_macs: int
    linear_macs: int
    seconds: float

    @property
    def total_macs(self) -> int:
        return self.quadratic_macs + self.linear_macs


def measure_attention(tokens: int, d: int, heads: int = 2, batch: int = 8, repeats: int = 5,
                      seed: int = 0) -> AttentionCost:
    """Count per-sample multiply-adds and time one attention layer over ``tokens`` tokens."""
    rng = np.random.default_rng(seed)
    mha = MultiHeadAttention(d, heads, rng)
    x = Tensor(rng.standard_normal((batch, tokens, d)).astype(np.float32))
    mask = np.ones((batch, tokens), dtype=bool)
    with T.no_grad():
        with T.count_macs() as counter:
            mha(x, mask)
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            mha(x, mask)
            best = min(best, time.perf_counter() - t0)
    quad = sum(counter[t] for t in QUADRATIC_TAGS) // batch
    return AttentionCost(tokens, quad, counter["proj"] // batch, best)


@dataclass
class BenchRow:
    L: int
    k: int
    N_f: int
    d: int
    tokens_cdnet: int
    tokens_full: int
    quad_macs_cdnet: int
    quad_macs_full: int
    total_macs_cdnet: int
    total_macs_full: int
    predicted_ratio: float
    measured_ratio: float
    seconds_cdnet: float
    seconds_full: float

    @property
    def wall_ratio(self) -> float:
        return self.seconds_cdnet / self.seconds_full

    def as_dict(self) -> dict:
        return {**asdict(self), "wall_ratio": self.wall_ratio}


def bench(L_values, k: int = 16, N_f: int = 20, d: int = 32, heads: int = 2, batch: int = 8,
          repeats: int = 5, seed: int = 0) -> list[BenchRow]:
    """Compare ``k + 1 + N_f`` selected tokens against ``L + N_f`` full-sequence tokens.

    ``predicted_ratio`` is ``((k + 1 + N_f) / (L + N_f))^2``;
    ``measured_ratio`` is the ratio of counted quadratic-term multiply-adds.
    """
    rows = []
    for L in L_values:
        if L < 1 or k < 1 or N_f < 0 or d < 1:
            raise ValueError("bench sizes must be positive")
        t_small, t_full = k + 1 + N_f, L + N_f
        small = measure_attention(t_small, d, heads, batch, repeats, seed)
        full = measure_attention(t_full, d, heads, batch, repeats, seed)
        rows.append(BenchRow(L, k, N_f, d, t_small, t_full, small.quadratic_macs, full.quadratic_macs,
                             small.total_macs, full.total_macs, (t_small / t_full) ** 2,
                             small.quadratic_macs / full.quadratic_macs, small.seconds, full.seconds))
    return rows


def quadratic_scaling(L: int, N_f: int = 20, d: int = 32, heads: int = 2, batch: int = 2,
                      repeats: int = 15, seed: int = 0) -> dict:
    """Wall time of the score and mixing matmuls at ``L`` and ``2L`` (full sequence).

    Returns the measured time ratio and the ratio the token counts predict.
    A small batch keeps the score matrices cache-resident so the timing
    tracks arithmetic rather than memory traffic.
    """
    def timed(tokens):
        rng = np.random.default_rng(seed)
        h = d // heads
        q = rng.standard_normal((batch, heads, tokens, h)).astype(np.float32)
        k = rng.standard_normal((batch, heads, h, tokens)).astype(np.float32)
        v = rng.standard_normal((batch, heads, tokens, h)).astype(np.float32)
        best = float("inf")
        for _ in range(repeats):
            t0 = time.perf_counter()
            (q @ k) @ v
            best = min(best, time.perf_counter() - t0)
        return best

    t1, t2 = timed(L + N_f), timed(2 * L + N_f)
    return {"L": L, "measured": t2 / t1, "predicted": ((2 * L + N_f) / (L + N_f)) ** 2}
