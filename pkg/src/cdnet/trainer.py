"""Optimization loop, checkpoints and hyperparameter sweeps."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .data import SampleSet, Schema, batches
from .metrics import evaluate_all
from .model import CTRModel, build_variant
from .tensor import Parameter

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CDNT"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    """Optimization diverged."""


class CheckpointError(ValueError):
    """A checkpoint file could not be read back."""


class Adam:
    """Adam with bias correction. Rows listed in ``Parameter.frozen_rows`` never move."""

    def __init__(self, params: Sequence[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.0):
        self.params = [p for p in params if p.trainable]
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {p.name: np.zeros_like(p.data) for p in self.params}
        self.v = {p.name: np.zeros_like(p.data) for p in self.params}

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p in self.params:
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            if p.frozen_rows:
                g = g.copy()
                g[list(p.frozen_rows)] = 0.0
            m, v = self.m[p.name], self.v[p.name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)


@dataclass
class TrainResult:
    model: CTRModel
    trace: list[dict] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    best_epoch: int = 0
    optimizer: Adam | None = None

    @property
    def initial_loss(self) -> float:
        return self.losses[0]


def evaluate(model: CTRModel, samples: SampleSet, batch_size: int = 1024) -> dict[str, float]:
    preds = predict(model, samples, batch_size)
    return evaluate_all(samples.user, preds, samples.label)


def predict(model: CTRModel, samples: SampleSet, batch_size: int = 1024) -> np.ndarray:
    return np.concatenate([model.predict(b) for b in batches(samples, batch_size)]) if len(samples) else np.zeros(0)


def train(config: TrainConfig, train_set: SampleSet, valid_set: SampleSet | None = None,
          on_record: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit a model; keeps the parameters of the best validation-AUC epoch.

    Every epoch emits a ``train`` record (mean loss) and, when a validation
    set is given, a ``valid`` record with AUC/GAUC/LogLoss. Training stops
    early after ``config.patience`` epochs without validation-AUC gain.
    """
    config.validate()
    if len(train_set) == 0:
        raise ValueError("empty training set")
    model = build_variant(config, train_set.schema)
    params = model.parameters()
    opt = Adam(params, config.lr, config.beta1, config.beta2, config.eps, config.weight_decay)
    result = TrainResult(model)
    best_auc, best_state, stale = -math.inf, None, 0

    def emit(rec):
        result.trace.append(rec)
        if on_record:
            on_record(rec)

    for epoch in range(1, config.epochs + 1):
        epoch_losses = []
        for bi, batch in enumerate(batches(train_set, config.batch_size, shuffle_seed=_epoch_seed(config.seed, epoch))):
            loss, _ = model.loss(batch)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {bi}")
            T.backward(loss, params)
            opt.step()
            epoch_losses.append(value)
        result.losses.extend(epoch_losses)
        emit({"epoch": epoch, "split": "train", "loss": float(np.mean(epoch_losses))})
        opt.lr *= config.lr_decay
        if valid_set is None or len(valid_set) == 0:
            result.best_epoch = epoch
            continue
        metrics = evaluate(model, valid_set)
        emit({"epoch": epoch, "split": "valid", **metrics})
        score = metrics["auc"] if math.isfinite(metrics["auc"]) else -metrics["logloss"]
        if score > best_auc:
            best_auc, stale, result.best_epoch = score, 0, epoch
            best_state = {p.name: p.data.copy() for p in params}
        else:
            stale += 1
            if stale >= config.patience:
                log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                break
    if best_state is not None:
        for p in params:
            p.data[...] = best_state[p.name]
    result.optimizer = opt
    return result


def _epoch_seed(seed: int, epoch: int) -> int:
    return (seed * 100_003 + epoch) % (2 ** 32)


# -- sweeps ------------------------------------------------------------------------

SWEEP_AXES = ("k_ratio", "n")


def sweep(axis: str, values: Sequence[float], config: TrainConfig, train_set: SampleSet,
          valid_set: SampleSet | None, test_set: SampleSet) -> list[dict]:
    """Train one model per value of ``axis`` and score it on ``test_set``.

    ``k_ratio`` sets ``k = round(value * L_max)``. A failing cell is
    reported with an ``error`` entry and the sweep continues.
    """
    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    if not values:
        raise ValueError("sweep needs at least one value")
    rows = []
    for value in values:
        row = {"axis": axis, "value": value}
        try:
            if axis == "k_ratio":
                cfg = config.replace(k=max(1, int(round(value * config.L_max))))
                row["k"] = cfg.k
            else:
                cfg = config.replace(n=int(value))
            res = train(cfg, train_set, valid_set)
            row.update(evaluate(res.model, test_set))
        except Exception as e:  # noqa: BLE001 - one bad cell must not sink the sweep
            log.error("sweep cell %s=%s failed: %s", axis, value, e)
            row.update({"auc": math.nan, "gauc": math.nan, "logloss": math.nan, "error": str(e)})
        rows.append(row)
    return rows


# -- checkpoints ------------------------------------------------------------------

def save_checkpoint(model: CTRModel, path, optimizer: Adam | None = None) -> None:
    """``CDNT`` + u32 version + JSON header + per-tensor records (float32 values)."""
    header = {"config": model.config.to_dict(), "schema": model.schema.to_dict(),
              "adam_step": optimizer.t if optimizer else 0}
    tensors = [(p.name, p.data) for p in model.parameters()]
    if optimizer is not None:
        tensors += [(f"adam.m.{k}", v) for k, v in optimizer.m.items()]
        tensors += [(f"adam.v.{k}", v) for k, v in optimizer.v.items()]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(blob)) + blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_checkpoint(path, config: TrainConfig | None = None) -> tuple[CTRModel, Adam | None]:
    """Rebuild a model (and optimizer state, if stored) from ``path``.

    If ``config`` is given the tensors must fit a model built from it;
    otherwise the stored config is used.
    """
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    try:
        (version,) = struct.unpack_from("<I", raw, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"{path}: version {version}, expected {CKPT_VERSION}")
        (hlen,) = struct.unpack_from("<I", raw, 8)
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
        off = 12 + hlen
        (count,) = struct.unpack_from("<I", raw, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", raw, off)
            name = raw[off + 4:off + 4 + nlen].decode("utf-8")
            off += 4 + nlen
            (rank,) = struct.unpack_from("<I", raw, off)
            shape = struct.unpack_from(f"<{rank}Q", raw, off + 4)
            off += 4 + 8 * rank
            size = int(np.prod(shape))
            if off + 4 * size > len(raw):
                raise CheckpointError(f"{path}: truncated data for tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: truncated or corrupt checkpoint ({e})") from e

    cfg = config or TrainConfig.from_dict(header["config"])
    model = build_variant(cfg, Schema.from_dict(header["schema"]))
    for p in model.parameters():
        if p.name not in tensors:
            raise CheckpointError(f"{path}: missing tensor {p.name!r}")
        stored = tensors[p.name]
        if stored.shape != p.shape:
            raise CheckpointError(f"{path}: shape mismatch for tensor {p.name!r}: "
                                  f"file has {stored.shape}, model expects {p.shape}")
        p.data[...] = stored
    opt = None
    if any(k.startswith("adam.") for k in tensors):
        opt = Adam(model.parameters(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
        opt.t = int(header.get("adam_step", 0))
        for k in opt.m:
            opt.m[k][...] = tensors[f"adam.m.{k}"]
            opt.v[k][...] = tensors[f"adam.v.{k}"]
    return model, opt
