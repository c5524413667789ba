import math
import struct

import numpy as np
import pytest

from cdnet.config import TrainConfig
from cdnet.data import SynthConfig, synth_generate
from cdnet.tensor import Parameter
from cdnet.trainer import (CKPT_MAGIC, Adam, CheckpointError, TrainingError, evaluate, load_checkpoint, predict,
                           save_checkpoint, sweep, train)

SYNTH = SynthConfig(n_items=400, n_users=20, seq_len=12, min_valid=6, max_same_category=6, max_relevant=3,
                    k_true=4, w_dist=2.0)


@pytest.fixture(scope="module")
def data():
    s = synth_generate(SYNTH, 900, seed=0)
    return s.subset(np.arange(600)), s.subset(np.arange(600, 750)), s.subset(np.arange(750, 900))


def cfg(**kw):
    base = dict(d=8, k=3, n=3, H=1, heads=2, L_max=12, head_hidden=(8,), batch_size=64, epochs=2, lr=5e-3)
    return TrainConfig(**{**base, **kw})


@pytest.fixture(scope="module")
def trained(data):
    tr, va, _ = data
    return train(cfg(), tr, va)


class TestAdam:
    def quadratic_step(self, lr):
        p = Parameter(np.array([3.0, -2.0]), "x")
        p.grad = 2 * p.data  # d/dx of |x|^2
        before = p.data.copy()
        Adam([p], lr=lr).step()
        return before, p.data

    def test_moves_toward_minimum(self):
        before, after = self.quadratic_step(0.1)
        assert np.all(np.abs(after) < np.abs(before))

    def test_step_scales_with_lr(self):
        b1, a1 = self.quadratic_step(1e-3)
        b2, a2 = self.quadratic_step(1e-6)
        ratio = np.linalg.norm(a1 - b1) / np.linalg.norm(a2 - b2)
        assert ratio == pytest.approx(1000, rel=1e-6)

    def test_frozen_rows_never_move(self):
        p = Parameter(np.ones((3, 2)), "t", frozen_rows=(0,))
        opt = Adam([p], lr=0.5, weight_decay=0.1)
        for _ in range(3):
            p.grad = np.ones((3, 2))
            opt.step()
        np.testing.assert_array_equal(p.data[0], 1.0)
        assert np.all(p.data[1:] < 1.0)


class TestTrain:
    def test_trace_layout(self, trained):
        splits = [(r["epoch"], r["split"]) for r in trained.trace]
        assert splits[:2] == [(1, "train"), (1, "valid")]
        assert {"auc", "gauc", "logloss"} <= set(trained.trace[1])

    def test_zero_lr_keeps_parameters(self, data):
        tr, _, _ = data
        from cdnet.model import build_variant
        fresh = build_variant(cfg(), tr.schema)
        res = train(cfg(lr=0.0, epochs=1), tr)
        for a, b in zip(fresh.parameters(), res.model.parameters()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_bitwise_deterministic(self, data, trained):
        tr, va, _ = data
        again = train(cfg(), tr, va)
        assert np.array(again.losses).tobytes() == np.array(trained.losses).tobytes()
        assert again.trace == trained.trace

    def test_different_seed_changes_trace(self, data, trained):
        tr, va, _ = data
        assert train(cfg(seed=1), tr, va).losses != trained.losses

    def test_best_epoch_is_restored(self, data):
        tr, va, _ = data
        res = train(cfg(epochs=4, patience=1), tr, va)
        valid = {r["epoch"]: r for r in res.trace if r["split"] == "valid"}
        best = max(valid, key=lambda e: valid[e]["auc"])
        assert res.best_epoch == best
        assert evaluate(res.model, va)["auc"] == pytest.approx(valid[best]["auc"], abs=1e-12)

    def test_early_stopping(self, data):
        tr, va, _ = data
        res = train(cfg(epochs=30, patience=1, lr=0.05), tr, va)
        last = max(r["epoch"] for r in res.trace)
        assert last < 30 and last - res.best_epoch == 1

    def test_divergence_is_reported(self, data):
        tr, _, _ = data
        with pytest.raises(TrainingError, match="epoch 1, batch"):
            with np.errstate(all="ignore"):
                train(cfg(lr=1e30, epochs=1, batch_size=8), tr)

    def test_loss_falls_on_strong_planted_signal(self):
        strong = SynthConfig(n_items=400, n_users=20, seq_len=16, min_valid=10, max_same_category=8,
                             max_relevant=4, k_true=5, w_core=3.0, w_dist=3.0, noise=0.0)
        res = train(cfg(d=16, k=4, L_max=16, head_hidden=(32,), epochs=6, lr=6e-3, batch_size=128),
                    synth_generate(strong, 4000, seed=0))
        assert res.trace[-1]["loss"] < 0.8 * res.initial_loss

    def test_empty_training_set(self, data):
        tr, _, _ = data
        with pytest.raises(ValueError):
            train(cfg(), tr.subset(np.arange(0)))


class TestSweep:
    def test_full_ratio_means_k_equals_l_max(self, data):
        tr, va, te = data
        rows = sweep("k_ratio", [1.0], cfg(epochs=1), tr, va, te)
        assert len(rows) == 1 and rows[0]["k"] == 12 and math.isfinite(rows[0]["auc"])

    def test_failing_cell_does_not_stop_the_sweep(self, data):
        tr, va, te = data
        rows = sweep("n", [0, 2], cfg(epochs=1), tr, va, te)
        assert "error" in rows[0] and math.isnan(rows[0]["auc"])
        assert "error" not in rows[1]

    def test_bad_axis_and_empty_values(self, data):
        tr, va, te = data
        with pytest.raises(ValueError):
            sweep("lr", [0.1], cfg(), tr, va, te)
        with pytest.raises(ValueError):
            sweep("n", [], cfg(), tr, va, te)


class TestCheckpoint:
    def test_round_trip_is_bitwise(self, trained, data, tmp_path):
        _, _, te = data
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained.model, path, trained.optimizer)
        model, opt = load_checkpoint(path)
        assert predict(model, te).tobytes() == predict(trained.model, te).tobytes()
        assert opt.t == trained.optimizer.t
        for k in opt.m:
            np.testing.assert_array_equal(opt.m[k], trained.optimizer.m[k])

    def test_truncated(self, trained, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained.model, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "m.ckpt"
        path.write_bytes(b"XXXX" + bytes(16))
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)

    def test_version_mismatch(self, trained, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained.model, path)
        raw = bytearray(path.read_bytes())
        raw[4:8] = struct.pack("<I", 99)
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)
        assert bytes(raw[:4]) == CKPT_MAGIC

    def test_shape_mismatch_names_tensor(self, trained, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained.model, path)
        with pytest.raises(CheckpointError, match=r"encoder\.tables\.item"):
            load_checkpoint(path, cfg(d=4))
