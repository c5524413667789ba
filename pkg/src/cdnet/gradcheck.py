"""Central finite-difference oracles for checking analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

STEP = 1e-5


def numerical_grad(f: Callable[[], float], x: np.ndarray, step: float = STEP,
                   index: Sequence[int] | None = None) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place.

    ``index`` restricts the check to a subset of flat positions; the others
    are left at zero.
    """
    grad = np.zeros_like(x, dtype=np.float64)
    flat_x, flat_g = x.reshape(-1), grad.reshape(-1)
    for i in (range(x.size) if index is None else index):
        orig = flat_x[i]
        flat_x[i] = orig + step
        up = f()
        flat_x[i] = orig - step
        down = f()
        flat_x[i] = orig
        flat_g[i] = (up - down) / (2 * step)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-10) -> float:
    """Largest absolute deviation relative to the larger gradient's max magnitude."""
    a, b = np.asarray(analytic, dtype=np.float64), np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_op(op: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
             step: float = STEP, oracle: Callable[..., Tensor] | None = None) -> list[float]:
    """Relative error of every input gradient of ``op`` at 64-bit.

    The scalar objective is ``sum(op(*inputs) * W)`` with a fixed random
    ``W`` so every output entry is exercised. Finite differences are taken
    of ``oracle`` when given (for ops whose forward value is piecewise
    constant but whose gradient is defined by a surrogate).
    """
    probe = oracle or op
    arrays = [np.array(x, dtype=np.float64) for x in inputs]
    tensors = [Tensor(x, requires_grad=True) for x in arrays]
    out = op(*tensors)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    T.backward(T.sum(T.mul(out, weights)))
    analytic = [t.grad.copy() for t in tensors]

    errors = []
    for t, g in zip(tensors, analytic):
        def f():
            with T.no_grad():
                return float((probe(*tensors).data * weights).sum())
        errors.append(rel_error(g, numerical_grad(f, t.data, step)))
    return errors
