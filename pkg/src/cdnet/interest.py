"""Similarity histogram over the whole sequence and its pooled embedding."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .nn import Module, uniform
from .tensor import Parameter, Tensor

N_COUNT_BUCKETS = 17


def histogram(scores, n: int, mask: np.ndarray | None = None) -> np.ndarray:
    """Count valid scores per similarity interval.

    The intervals are ``[0, 1/n]`` then ``((j-1)/n, j/n]``; a score equal to
    ``j/n`` lands in interval ``j``. Edges are compared in the scores' own
    dtype so boundary values behave the same at 32 and 64 bit.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    a = np.asarray(scores.data if isinstance(scores, Tensor) else scores)
    if a.dtype.kind != "f":
        a = a.astype(np.float64)
    mask = a >= 0 if mask is None else np.asarray(mask, dtype=bool)
    edges = (np.arange(1, n) / n).astype(a.dtype)
    bins = np.searchsorted(edges, a, side="left")
    lead = a.shape[:-1]
    flat_bins = bins.reshape(-1, a.shape[-1])
    flat_mask = mask.reshape(-1, a.shape[-1])
    counts = np.zeros((flat_bins.shape[0], n), dtype=np.int64)
    rows = np.broadcast_to(np.arange(flat_bins.shape[0])[:, None], flat_bins.shape)
    np.add.at(counts, (rows[flat_mask], flat_bins[flat_mask]), 1)
    return counts.reshape(lead + (n,))


def count_bucket(counts) -> np.ndarray:
    """``floor(log2(count + 1))`` clamped to the last bucket."""
    c = np.asarray(counts, dtype=np.int64)
    return np.minimum(np.floor(np.log2(c + 1)).astype(np.int64), N_COUNT_BUCKETS - 1)


class CountEmbedder(Module):
    """``n`` count-embedding tables, one per similarity interval.

    Stored as a single ``[n * N_COUNT_BUCKETS, d]`` parameter; interval ``j``
    owns rows ``j * N_COUNT_BUCKETS`` onwards.
    """

    def __init__(self, n: int, d: int, rng: np.random.Generator, dtype=np.float32):
        self.n = n
        self.tables = Parameter(uniform(rng, (n * N_COUNT_BUCKETS, d), 1.0 / np.sqrt(d), dtype), "tables")

    def rows(self, counts) -> np.ndarray:
        offsets = np.arange(self.n) * N_COUNT_BUCKETS
        return count_bucket(counts) + offsets


def embed_distribution(counts, embedder: CountEmbedder) -> Tensor:
    """Mean of the ``n`` per-interval count embeddings, shape ``[..., d]``."""
    looked = T.embedding_lookup(embedder.tables, embedder.rows(counts))
    return T.mean(looked, axis=-2)
