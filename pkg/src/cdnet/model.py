"""The full CTR model and its ablation variants."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .core_behaviors import CoreSelection, ScoreVector, score_sequence, ste_gather, top_k_select
from .data import Batch, ConfigError, Schema
from .embeddings import FeatureEncoder
from .interaction import Block, PredictionHead, TokenMatrix, build_tokens
from .interest import CountEmbedder, embed_distribution, histogram
from .nn import Module
from .tensor import Tensor


@dataclass
class Frozen:
    """Discrete choices of a base forward pass, replayed by gradient checks."""

    selection: CoreSelection | None
    offset: np.ndarray | None
    counts: np.ndarray | None


@dataclass
class ForwardOutput:
    pred: Tensor
    tokens: TokenMatrix
    scores: ScoreVector | None = None
    selection: CoreSelection | None = None
    counts: np.ndarray | None = None

    def frozen(self) -> Frozen:
        offset = None
        if self.selection is not None:
            offset = self.selection.selected - self.scores.scores.data
        return Frozen(self.selection, offset, self.counts)


class CTRModel(Module):
    """Core-behavior / interest-distribution interaction network.

    ``variant`` picks the token set: ``cdnet`` uses core behaviors, the
    interest token and the contextual tokens; ``rcore`` drops the core
    behaviors; ``rgid`` drops the interest token; ``meanpool`` replaces both
    by the masked mean of all behavior embeddings.
    """

    def __init__(self, config: TrainConfig, schema: Schema):
        config.validate()
        if config.N_f != schema.n_fields:
            raise ConfigError(f"N_f: config says {config.N_f}, data has {schema.n_fields} contextual fields")
        self.config = config
        self.schema = schema
        dtype = np.dtype(config.precision)
        rng = np.random.default_rng(config.seed)
        d, variant = config.d, config.variant
        self.encoder = FeatureEncoder(schema, d, rng, dtype)
        if variant in ("cdnet", "rcore"):
            self.interest = CountEmbedder(config.n, d, rng, dtype)
        n_tok = config.tokens
        self.blocks = [Block(n_tok, d, config.heads, config.ffn_mult, rng, dtype) for _ in range(config.H)]
        self.head = PredictionHead(n_tok * d, config.head_hidden, rng, dtype)
        self.assign_names()

    @property
    def uses_core(self) -> bool:
        return self.config.variant in ("cdnet", "rgid")

    @property
    def uses_gid(self) -> bool:
        return self.config.variant in ("cdnet", "rcore")

    def forward(self, batch: Batch, frozen: Frozen | None = None) -> ForwardOutput:
        cfg = self.config
        ctx = self.encoder.encode_context(batch)
        behaviors, mask = self.encoder.encode_behaviors(batch)
        out = {}
        core = core_mask = gid = None
        if cfg.variant == "meanpool":
            gid = _masked_mean(behaviors, mask)
        else:
            target = self.encoder.encode_target(batch)
            scores = score_sequence(target, behaviors, mask)
            out["scores"] = scores
            if self.uses_core:
                sel = frozen.selection if frozen else top_k_select(scores, cfg.k)
                core = ste_gather(behaviors, scores, sel, frozen.offset if frozen else None)
                core_mask = sel.core_mask
                out["selection"] = sel
            if self.uses_gid:
                counts = frozen.counts if frozen else histogram(scores.scores, cfg.n, mask)
                gid = embed_distribution(counts, self.interest)
                out["counts"] = counts
        tokens = build_tokens(core, core_mask, gid, ctx)
        x = T.mul(tokens.x, tokens.mask[..., None].astype(tokens.x.dtype))
        for block in self.blocks:
            x = block(x, tokens.mask)
        return ForwardOutput(self.head(x), tokens, **out)

    def loss(self, batch: Batch, frozen: Frozen | None = None) -> tuple[Tensor, ForwardOutput]:
        out = self.forward(batch, frozen)
        return T.bce_loss(out.pred, batch.label), out

    def predict(self, batch: Batch) -> np.ndarray:
        with T.no_grad():
            return self.forward(batch).pred.data


def _masked_mean(behaviors: Tensor, mask: np.ndarray) -> Tensor:
    m = mask.astype(behaviors.dtype)
    denom = np.maximum(m.sum(axis=1, keepdims=True), 1.0)
    return T.sum(T.mul(behaviors, (m / denom)[..., None]), axis=1)


def build_variant(config: TrainConfig, schema: Schema) -> CTRModel:
    return CTRModel(config, schema)
