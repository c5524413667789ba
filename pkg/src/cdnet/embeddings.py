"""Embedding tables for contextual fields, the target item and behavior events."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .data import PAD, Batch, Schema
from .nn import Module, uniform
from .tensor import Parameter, Tensor


class FeatureEncoder(Module):
    """One table per embedding namespace.

    The target item / category fields and the behavior sequence read the same
    ``item`` and ``category`` tables. Row ``PAD`` of every table is zero and
    excluded from optimizer updates.
    """

    def __init__(self, schema: Schema, d: int, rng: np.random.Generator, dtype=np.float32):
        self.schema = schema
        self.d = d
        bound = 1.0 / np.sqrt(d)
        self.tables: dict[str, Parameter] = {}
        for name in ["item", "category"] + [schema.table_for(f) for f in schema.fields]:
            if name in self.tables:
                continue
            w = uniform(rng, (schema.table_sizes[name], d), bound, dtype)
            w[PAD] = 0.0
            self.tables[name] = Parameter(w, name, frozen_rows=(PAD,))

    def encode_context(self, batch: Batch) -> Tensor:
        """``[B, N_f, d]``: one token per contextual field."""
        tokens = [T.embedding_lookup(self.tables[self.schema.table_for(f)], batch.context[:, j:j + 1])
                  for j, f in enumerate(self.schema.fields)]
        return T.concat(tokens, axis=1)

    def encode_behaviors(self, batch: Batch) -> tuple[Tensor, np.ndarray]:
        """``s_j = item(j) + category(j)``, shape ``[B, L, d]``, plus the validity mask."""
        s = T.add(T.embedding_lookup(self.tables["item"], batch.items),
                  T.embedding_lookup(self.tables["category"], batch.categories))
        return s, batch.mask

    def encode_target(self, batch: Batch) -> Tensor:
        """``f_i = item(target) + category(target)``, shape ``[B, d]``."""
        fields = self.schema.fields
        item_ids = batch.context[:, fields.index("target_item")]
        cat_ids = batch.context[:, fields.index("target_category")]
        return T.add(T.embedding_lookup(self.tables["item"], item_ids),
                     T.embedding_lookup(self.tables["category"], cat_ids))
