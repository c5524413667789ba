"""Dense NumPy tensors with define-by-run reverse-mode differentiation.

The graph is rebuilt on every forward pass. Each differentiable op returns a
new :class:`Tensor` holding references to its inputs and a closure that maps
the output gradient to input gradients. :func:`backward` walks the graph in
reverse topological order and writes gradients into the leaf tensors.

Only the operations the CTR model needs are provided. Elementwise binary ops
accept NumPy-style broadcasting of the second operand (used for biases and
per-row scaling); everything else requires exact shapes.
"""

from __future__ import annotations

import builtins
import contextlib
import threading
from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

__all__ = [
    "Tensor", "Parameter", "ShapeError", "backward", "no_grad", "count_macs",
    "matmul", "add", "sub", "mul", "neg", "sum", "mean", "reshape", "transpose",
    "concat", "sigmoid", "relu", "softmax_rows", "masked_fill", "layer_norm",
    "gather_rows", "stop_gradient", "straight_through", "embedding_lookup",
    "cosine_scores", "bce_loss", "constant",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


_local = threading.local()


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, benchmarking)."""
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


class MacCounter:
    """Multiply-accumulate tally per matmul tag."""

    def __init__(self):
        self.by_tag: dict[str, int] = defaultdict(int)

    @property
    def total(self) -> int:
        return int(builtins.sum(self.by_tag.values()))

    def __getitem__(self, tag: str) -> int:
        return int(self.by_tag.get(tag, 0))


@contextlib.contextmanager
def count_macs():
    """Count multiply-accumulates of every :func:`matmul` run inside the block."""
    counter = MacCounter()
    stack = getattr(_local, "counters", None)
    if stack is None:
        stack = _local.counters = []
    stack.append(counter)
    try:
        yield counter
    finally:
        stack.pop()


class Tensor:
    """An n-d array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __len__(self):
        return len(self.data)

    def backward(self) -> dict:
        return backward(self)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(constant(o, self.dtype), self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(constant(o, self.dtype), self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(constant(o, self.dtype), self)
    __neg__ = lambda self: neg(self)
    __matmul__ = lambda self, o: matmul(self, o)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a scalar")
        return mul(self, 1.0 / other)


class Parameter(Tensor):
    """A trainable leaf tensor with a model-unique name.

    ``frozen_rows`` lists first-axis rows the optimizer never updates (the
    padding row of an embedding table). ``touched_rows`` is filled by
    :func:`embedding_lookup` backward with the rows that received gradient.
    """

    __slots__ = ("name", "trainable", "frozen_rows", "touched_rows")

    def __init__(self, data, name: str, trainable: bool = True, frozen_rows: Sequence[int] = (), dtype=None):
        super().__init__(data, requires_grad=trainable, dtype=dtype)
        self.name = name
        self.trainable = trainable
        self.frozen_rows = tuple(frozen_rows)
        self.touched_rows: np.ndarray | None = None
        self.grad = np.zeros_like(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)
        self.touched_rows = None

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape}, dtype={self.dtype})"


def constant(value, dtype=np.float32) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _as_tensor(x, like: Tensor) -> Tensor:
    return x if isinstance(x, Tensor) else constant(x, like.dtype)


def _node(data: np.ndarray, parents: tuple, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
    return out


class _RowGrad:
    """Sparse gradient for an embedding table: (row ids, row gradients)."""

    __slots__ = ("rows", "values")

    def __init__(self, rows: np.ndarray, values: np.ndarray):
        self.rows = rows
        self.values = values


def _accumulate(store: dict, key: int, g, like: Tensor):
    if g is None:
        return
    cur = store.get(key)
    if cur is None:
        store[key] = g
    elif isinstance(cur, _RowGrad) and isinstance(g, _RowGrad):
        store[key] = _RowGrad(np.concatenate([cur.rows, g.rows]), np.concatenate([cur.values, g.values]))
    else:
        store[key] = _dense(cur, like) + _dense(g, like)


def _scatter_add(out: np.ndarray, rows: np.ndarray, values: np.ndarray) -> np.ndarray:
    """``out[rows] += values`` with repeated rows summed in a fixed order."""
    if rows.size == 0:
        return out
    n = rows.size
    pick = sparse.csr_matrix((np.ones(n, dtype=values.dtype), (rows, np.arange(n))), shape=(out.shape[0], n))
    out += (pick @ values.reshape(n, -1)).reshape(out.shape)
    return out


def _dense(g, like: Tensor) -> np.ndarray:
    if isinstance(g, _RowGrad):
        return _scatter_add(np.zeros(like.shape, dtype=like.dtype), g.rows, g.values)
    return g


def _topo_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Parameter] | None = None) -> dict:
    """Populate gradients of every leaf reachable from the scalar ``loss``.

    Leaf gradients are overwritten, not accumulated across calls. Parameters
    passed in ``params`` that the loss does not reach get zero gradient.

    Returns
    -------
    dict
        Mapping from leaf tensor to its gradient array.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, object] = {id(loss): np.ones_like(loss.data)}
    result = {}
    for node in reversed(_topo_order(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if isinstance(g, _RowGrad) and isinstance(node, Parameter):
                node.touched_rows = np.unique(g.rows)
            g = _dense(g, node)
            node.grad = g
            result[node] = g
            continue
        parent_grads = node._backward(_dense(g, node))
        for p, pg in zip(node._parents, parent_grads):
            if p.requires_grad:
                _accumulate(grads, id(p), pg, p)
    if params is not None:
        for p in params:
            if p not in result:
                p.zero_grad()
    return result


# -- helpers -------------------------------------------------------------------

def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _check_broadcast(a: Tensor, b: Tensor, op: str):
    try:
        out = np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot combine shapes {a.shape} and {b.shape}") from None
    if out != a.shape and out != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} broadcast to neither operand")


# -- elementwise ---------------------------------------------------------------

def add(a, b) -> Tensor:
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "add")
    return _node(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "sub")
    return _node(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a = _as_tensor(a, b) if not isinstance(a, Tensor) else a
    b = _as_tensor(b, a)
    _check_broadcast(a, b, "mul")
    return _node(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    # two-branch form avoids exp overflow for large |x|
    e = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return _node(a.data * keep, (a,), lambda g: (g * keep,))


def masked_fill(a: Tensor, keep: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``keep`` is False by ``value``; no gradient flows there."""
    keep = np.asarray(keep, dtype=bool)
    out = np.where(keep, a.data, np.asarray(value, dtype=a.dtype))
    return _node(out, (a,), lambda g: (np.where(keep, g, 0).astype(g.dtype),))


# -- reductions and shape ops -------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(tensors: Sequence[Tensor], axis: int = -2) -> Tensor:
    """Concatenate along ``axis`` (default: the token axis of a ``[..., T, d]`` stack)."""
    tensors = tuple(tensors)
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or t.shape[:ax] + t.shape[ax + 1:] != ref.shape[:ax] + ref.shape[ax + 1:]:
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref.shape} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _node(out, tensors, lambda g: tuple(np.split(g, splits, axis=ax)))


# -- linear algebra -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor, tag: str = "matmul") -> Tensor:
    """Matrix product over the last two axes.

    ``b`` either shares ``a``'s leading (batch) axes or is a plain 2-d matrix
    applied to every leading slice of ``a``.
    """
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2] or (
            b.ndim > 2 and a.shape[:-2] != b.shape[:-2]):
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data @ b.data
    counters = getattr(_local, "counters", None)
    if counters:
        macs = int(np.prod(out.shape)) * a.shape[-1]
        for c in counters:
            c.by_tag[tag] += macs

    def bw(g):
        ga = g @ np.swapaxes(b.data, -1, -2)
        if b.ndim == 2 and a.ndim > 2:
            p, q = b.shape
            gb = a.data.reshape(-1, p).T @ g.reshape(-1, q)
        else:
            gb = np.swapaxes(a.data, -1, -2) @ g
        return ga, gb

    return _node(out, (a, b), bw)


def softmax_rows(a: Tensor) -> Tensor:
    """Softmax over the last axis, stabilised by subtracting the row max."""
    x = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(x)
    s = e / e.sum(axis=-1, keepdims=True)
    return _node(s, (a,), lambda g: (s * (g - (g * s).sum(axis=-1, keepdims=True)),))


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise each row over the last axis, then apply ``gain`` and ``bias``."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        d = x.shape[-1]
        gx_hat = g * gain.data
        gx = inv / d * (d * gx_hat - gx_hat.sum(axis=-1, keepdims=True)
                        - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True))
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out.astype(x.dtype), (a, gain, bias), bw)


# -- indexing -------------------------------------------------------------------

def gather_rows(a: Tensor, idx) -> Tensor:
    """Select rows along the sequence axis.

    ``a`` has shape ``[*lead, L, *rest]`` and ``idx`` shape ``[*lead, k]``;
    the result has shape ``[*lead, k, *rest]``. Backward scatters into the
    source rows and leaves every other row at zero.
    """
    idx = np.asarray(idx, dtype=np.int64)
    lead = idx.shape[:-1]
    nlead = len(lead)
    if a.shape[:nlead] != lead:
        raise ShapeError(f"gather_rows: index shape {idx.shape} does not match tensor {a.shape}")
    length = a.shape[nlead]
    if idx.size and (idx.min() < 0 or idx.max() >= length):
        raise IndexError(f"gather_rows: index out of range [0, {length})")
    rest = a.shape[nlead + 1:]
    nb = int(np.prod(lead)) if lead else 1
    flat = (np.arange(nb)[:, None] * length + idx.reshape(nb, -1)).ravel()
    src = a.data.reshape((nb * length,) + rest)
    out = src[flat].reshape(idx.shape + rest)

    def bw(g):
        ga = _scatter_add(np.zeros_like(src), flat, g.reshape((-1,) + rest))
        return (ga.reshape(a.shape),)

    return _node(out, (a,), bw)


def stop_gradient(a: Tensor) -> Tensor:
    """Identity in the forward pass; contributes no gradient."""
    return Tensor(a.data)


def straight_through(hard, soft: Tensor) -> Tensor:
    """Value of ``hard`` with the gradient of ``soft``.

    This is ``sg(hard - soft) + soft`` evaluated exactly: the forward result is
    ``hard`` bit for bit rather than the rounded sum.
    """
    hard = np.asarray(hard, dtype=soft.dtype)
    if hard.shape != soft.shape:
        raise ShapeError(f"straight_through: shapes {hard.shape} and {soft.shape} differ")
    return _node(hard, (soft,), lambda g: (g,))


def embedding_lookup(table: Tensor, ids) -> Tensor:
    """Rows of ``table`` for every id; output shape ``ids.shape + (d,)``."""
    ids = np.asarray(ids, dtype=np.int64)
    vocab = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"embedding_lookup: id out of range [0, {vocab})")
    out = table.data[ids]
    d = table.shape[1:]
    return _node(out, (table,), lambda g: (_RowGrad(ids.ravel(), g.reshape((-1,) + d)),))


def cosine_scores(f: Tensor, s: Tensor, floor: float = 1e-12) -> Tensor:
    """Cosine similarity of each row of ``s`` with ``f``.

    ``f`` is ``[*lead, d]`` and ``s`` is ``[*lead, L, d]``; the result is
    ``[*lead, L]``. The norm product is floored at ``floor`` so zero vectors
    give a cosine of 0 instead of NaN.
    """
    if f.shape[:-1] != s.shape[:-2] or f.shape[-1] != s.shape[-1]:
        raise ShapeError(f"cosine_scores: shapes {f.shape} and {s.shape} are incompatible")
    fv = f.data[..., None, :]
    sv = s.data
    dot = (fv * sv).sum(axis=-1)
    nf = np.sqrt((f.data * f.data).sum(axis=-1))[..., None]
    ns = np.sqrt((sv * sv).sum(axis=-1))
    prod = nf * ns
    clipped = prod <= floor
    denom = np.where(clipped, floor, prod)
    cos = dot / denom

    def bw(g):
        w = (g / denom)[..., None]
        # d cos / d f = s / D - cos * f / |f|^2 (second term vanishes when the floor is active)
        c = np.where(clipped, 0.0, g * cos)[..., None]
        nf2 = np.maximum(nf * nf, floor)[..., None]
        ns2 = np.maximum(ns * ns, floor)[..., None]
        gf = (w * sv).sum(axis=-2) - (c / nf2 * fv).sum(axis=-2)
        gs = w * fv - c * sv / ns2
        return gf.astype(f.dtype), gs.astype(s.dtype)

    return _node(cos.astype(s.dtype), (f, s), bw)


def bce_loss(pred: Tensor, labels, clip: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with predictions clamped to ``[clip, 1 - clip]``."""
    y = np.asarray(labels, dtype=pred.dtype).reshape(pred.shape)
    p = pred.data
    inside = (p > clip) & (p < 1 - clip)
    pc = np.clip(p, clip, 1 - clip)
    n = p.size
    loss = -(y * np.log(pc) + (1 - y) * np.log(1 - pc)).mean()

    def bw(g):
        gp = (-(y / pc) + (1 - y) / (1 - pc)) / n
        return (g * gp * inside,)

    return _node(np.asarray(loss, dtype=p.dtype), (pred,), bw)
