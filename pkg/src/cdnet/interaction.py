"""Token assembly, transformer blocks with per-token FFNs, and the prediction head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .nn import Linear, Module, uniform
from .tensor import Parameter, ShapeError, Tensor

MASK_FILL = -1e9
LN_EPS = 1e-5


@dataclass
class TokenMatrix:
    x: Tensor           # [B, T, d]
    mask: np.ndarray    # [B, T] bool; False only for padded core slots


def build_tokens(core: Tensor | None, core_mask: np.ndarray | None, gid: Tensor | None,
                 context: Tensor) -> TokenMatrix:
    """Stack ``[core_1..core_k, gid, ctx_1..ctx_Nf]`` along the token axis.

    ``core`` or ``gid`` may be ``None`` for the ablated variants.
    """
    d = context.shape[-1]
    parts, masks = [], []
    batch = context.shape[0]
    if core is not None:
        if core.shape[-1] != d:
            raise ShapeError(f"core tokens have width {core.shape[-1]}, context has {d}")
        parts.append(core)
        masks.append(np.asarray(core_mask, dtype=bool))
    if gid is not None:
        if gid.shape[-1] != d:
            raise ShapeError(f"interest token has width {gid.shape[-1]}, context has {d}")
        parts.append(T.reshape(gid, (batch, 1, d)))
        masks.append(np.ones((batch, 1), dtype=bool))
    parts.append(context)
    masks.append(np.ones(context.shape[:2], dtype=bool))
    x = parts[0] if len(parts) == 1 else T.concat(parts, axis=1)
    return TokenMatrix(x, np.concatenate(masks, axis=1))


class MultiHeadAttention(Module):
    """Self-attention over tokens; masked tokens are never attended to."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator, dtype=np.float32):
        if d % heads:
            raise ValueError(f"width {d} is not divisible by {heads} heads")
        self.heads = heads
        bound = 1.0 / np.sqrt(d)
        self.w_q = Parameter(uniform(rng, (d, d), bound, dtype), "w_q")
        self.w_k = Parameter(uniform(rng, (d, d), bound, dtype), "w_k")
        self.w_v = Parameter(uniform(rng, (d, d), bound, dtype), "w_v")
        self.w_o = Parameter(uniform(rng, (d, d), bound, dtype), "w_o")

    def __call__(self, x: Tensor, mask: np.ndarray, return_weights: bool = False):
        b, t, d = x.shape
        h = self.heads

        def split(w):
            y = T.matmul(x, w, tag="proj")
            return T.transpose(T.reshape(y, (b, t, h, d // h)), (0, 2, 1, 3))

        q, k, v = split(self.w_q), split(self.w_k), split(self.w_v)
        logits = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2)), tag="qk"), 1.0 / np.sqrt(d // h))
        logits = T.masked_fill(logits, mask[:, None, None, :], MASK_FILL)
        weights = T.softmax_rows(logits)
        ctx = T.matmul(weights, v, tag="av")
        out = T.matmul(T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (b, t, d)), self.w_o, tag="proj")
        return (out, weights) if return_weights else out


class PerTokenFFN(Module):
    """A separate two-layer ReLU network for every token position."""

    def __init__(self, tokens: int, d: int, hidden: int, rng: np.random.Generator, dtype=np.float32):
        self.w1 = Parameter(uniform(rng, (tokens, d, hidden), 1.0 / np.sqrt(d), dtype), "w1")
        self.b1 = Parameter(np.zeros((tokens, 1, hidden), dtype=dtype), "b1")
        self.w2 = Parameter(uniform(rng, (tokens, hidden, d), 1.0 / np.sqrt(hidden), dtype), "w2")
        self.b2 = Parameter(np.zeros((tokens, 1, d), dtype=dtype), "b2")

    def __call__(self, x: Tensor) -> Tensor:
        xt = T.transpose(x, (1, 0, 2))                      # [T, B, d]
        hid = T.relu(T.add(T.matmul(xt, self.w1, tag="ffn"), self.b1))
        out = T.add(T.matmul(hid, self.w2, tag="ffn"), self.b2)
        return T.transpose(out, (1, 0, 2))


class Block(Module):
    """``X' = LN(MHA(X) + X)``, ``X'' = LN(PFFN(X') + X')``."""

    def __init__(self, tokens: int, d: int, heads: int, ffn_mult: int, rng, dtype=np.float32):
        self.attn = MultiHeadAttention(d, heads, rng, dtype)
        self.ln1_gain = Parameter(np.ones(d, dtype=dtype), "ln1_gain")
        self.ln1_bias = Parameter(np.zeros(d, dtype=dtype), "ln1_bias")
        self.ffn = PerTokenFFN(tokens, d, ffn_mult * d, rng, dtype)
        self.ln2_gain = Parameter(np.ones(d, dtype=dtype), "ln2_gain")
        self.ln2_bias = Parameter(np.zeros(d, dtype=dtype), "ln2_bias")

    def __call__(self, x: Tensor, mask: np.ndarray) -> Tensor:
        h = T.layer_norm(T.add(self.attn(x, mask), x), self.ln1_gain, self.ln1_bias, LN_EPS)
        out = T.layer_norm(T.add(self.ffn(h), h), self.ln2_gain, self.ln2_bias, LN_EPS)
        # padded core slots must not carry content into the next block or the head
        return T.mul(out, mask[..., None].astype(out.dtype))


def block_forward(x: Tensor, block: Block, mask: np.ndarray) -> Tensor:
    return block(x, mask)


class PredictionHead(Module):
    """ReLU MLP over the flattened token matrix, sigmoid output."""

    def __init__(self, n_in: int, hidden: tuple[int, ...], rng, dtype=np.float32):
        widths = (n_in,) + tuple(hidden) + (1,)
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]

    def __call__(self, x: Tensor) -> Tensor:
        h = T.reshape(x, (x.shape[0], -1))
        for layer in self.layers[:-1]:
            h = T.relu(layer(h))
        return T.sigmoid(T.reshape(self.layers[-1](h), (x.shape[0],)))


def predict(x: Tensor, head: PredictionHead) -> Tensor:
    return head(x)


bce_loss = T.bce_loss
