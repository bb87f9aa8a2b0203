"""Fold arithmetic, Adam updates, the training loop, and serialization."""

import numpy as np
import pytest

from dfcnn.data_io import synth_dataset
from dfcnn.model import NetworkConfig, build_network, count_params, predict
from dfcnn.tensor import Tensor
from dfcnn.training import (AdamState, Checkpoint, CheckpointError, FoldSpec, TrainConfig,
                            adam_step, load_checkpoint, make_folds, read_trace,
                            save_checkpoint, train, write_trace, TraceRow)

from oracles import fold_slices_direct

SMALL = NetworkConfig(blocks=((4, 2), (6, 2)), input_shape=(16, 16, 3))


def tiny_dataset(n_train=6, n_val=4, size=16, seed=0):
    return synth_dataset(n_train, n_val, size, seed)


class TestFolds:
    def test_paper_scale_slices(self):
        folds = make_folds(1082, 3110, 3)
        sizes = [len(f.opacity_indices) for f in folds]
        assert sizes == [1036, 1036, 1038]
        for f in folds:
            assert len(f.normal_indices) == 1082

    def test_small_exact_division(self):
        assert [len(f.opacity_indices) for f in make_folds(10, 9, 3)] == [3, 3, 3]

    def test_remainder_goes_to_final_fold(self):
        assert [len(f.opacity_indices) for f in make_folds(5, 7, 3)] == [2, 2, 3]

    def test_partition_property_randomized(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n_op = int(rng.integers(1, 500))
            k = int(rng.integers(1, n_op + 1))
            folds = make_folds(3, n_op, k)
            covered = []
            for f in folds:
                covered.extend(f.opacity_indices)
            assert covered == list(range(n_op))  # disjoint, ordered, covering
            direct = fold_slices_direct(n_op, k)
            assert [(f.opacity_indices.start, f.opacity_indices.stop)
                    for f in folds] == direct

    def test_too_many_folds_rejected(self):
        with pytest.raises(ValueError):
            make_folds(5, 3, 4)


class TestAdam:
    def make(self, value):
        p = Tensor.param(np.array([value]))
        return [p], AdamState.zeros_like([p])

    def test_zero_gradient_leaves_param_unchanged(self):
        params, state = self.make(1.5)
        adam_step(params, [np.zeros(1)], state, TrainConfig(), step=1)
        assert params[0].data[0] == 1.5

    def test_first_step_magnitude_hand_value(self):
        params, state = self.make(0.0)
        cfg = TrainConfig()
        adam_step(params, [np.ones(1)], state, cfg, step=1)
        # bias-corrected moments are exactly 1 at step 1
        expected = -cfg.learning_rate / (1.0 + cfg.eps)
        assert params[0].data[0] == pytest.approx(expected, rel=1e-12)

    def test_positive_gradient_descends_twice(self):
        params, state = self.make(1.0)
        cfg = TrainConfig()
        before = params[0].data[0]
        adam_step(params, [np.ones(1)], state, cfg, step=1)
        mid = params[0].data[0]
        adam_step(params, [np.ones(1)], state, cfg, step=2)
        after = params[0].data[0]
        assert after < mid < before

    def test_update_bounded_by_learning_rate(self):
        rng = np.random.default_rng(0)
        cfg = TrainConfig()
        for _ in range(50):
            p = Tensor.param(rng.normal(size=(3, 3)))
            state = AdamState.zeros_like([p])
            g = rng.normal(size=(3, 3)) * 10.0 ** rng.integers(-3, 3)
            before = p.data.copy()
            adam_step([p], [g], state, cfg, step=1)
            delta = np.abs(p.data - before)
            assert np.all(delta <= cfg.learning_rate * (1 + 1e-6))

    def test_shape_mismatch_rejected(self):
        params, state = self.make(0.0)
        with pytest.raises(ValueError):
            adam_step(params, [np.zeros(2)], state, TrainConfig(), step=1)


class TestTrainLoop:
    def test_step_count_for_one_epoch(self):
        ds = tiny_dataset(n_train=2, n_val=2)  # 4 train images total
        net = build_network(SMALL, seed=0)
        fold = make_folds(2, 2, 1)[0]
        cfg = TrainConfig(epochs=1, batch_size=2, seed=0)
        p_before = [t.data.copy() for _, t in net.params()]
        _, trace = train(net, fold, ds, cfg)
        assert len(trace) == 1
        # two optimizer steps: parameters moved
        assert any(np.any(t.data != b) for (_, t), b in zip(net.params(), p_before))

    def test_zero_epochs_no_change(self):
        ds = tiny_dataset(n_train=2, n_val=2)
        net = build_network(SMALL, seed=0)
        fold = make_folds(2, 2, 1)[0]
        before = [t.data.copy() for _, t in net.params()]
        _, trace = train(net, fold, ds, TrainConfig(epochs=0, seed=0))
        assert trace == []
        for (_, t), b in zip(net.params(), before):
            np.testing.assert_array_equal(t.data, b)

    def test_loss_decreases_on_smoke_run(self):
        ds = tiny_dataset(n_train=8, n_val=4)
        net = build_network(SMALL, seed=1)
        fold = make_folds(8, 8, 1)[0]
        _, trace = train(net, fold, ds, TrainConfig(epochs=5, batch_size=2, seed=1))
        assert trace[-1].train_loss < trace[0].train_loss

    def test_deterministic_under_seed(self):
        ds = tiny_dataset(n_train=4, n_val=2)
        fold = make_folds(4, 4, 1)[0]
        cfg = TrainConfig(epochs=2, batch_size=2, seed=7)
        traces = []
        for _ in range(2):
            net = build_network(SMALL, seed=3, dtype=np.float64)
            net, trace = train(net, fold, ds, cfg)
            traces.append(trace)
        assert traces[0] == traces[1]

    def test_nonzero_gradient_changes_parameter_each_step(self):
        ds = tiny_dataset(n_train=2, n_val=2)
        net = build_network(SMALL, seed=0)
        fold = make_folds(2, 2, 1)[0]
        # run one epoch; spot-check that hidden dense weights moved (they
        # always receive gradient through the head)
        w_before = net.hidden_w.data.copy()
        train(net, fold, ds, TrainConfig(epochs=1, batch_size=4, seed=0))
        assert np.any(net.hidden_w.data != w_before)

    def test_empty_fold_rejected(self):
        ds = tiny_dataset(n_train=2, n_val=2)
        net = build_network(SMALL, seed=0)
        bad = FoldSpec(index=1, normal_indices=range(0), opacity_indices=range(0))
        with pytest.raises(ValueError):
            train(net, bad, ds, TrainConfig(epochs=1))


class TestCheckpoint:
    def roundtrip(self, tmp_path, ckpt):
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, ckpt)
        return path, load_checkpoint(path)

    def test_parameters_bitwise_identical(self, tmp_path):
        net = build_network(SMALL, seed=5)
        _, loaded = self.roundtrip(tmp_path, Checkpoint.capture(net))
        restored = loaded.restore_network()
        assert count_params(restored) == count_params(net)
        for (_, a), (_, b) in zip(net.params(), restored.params()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_predictions_bitwise_identical(self, tmp_path):
        net = build_network(SMALL, seed=5)
        x = np.random.default_rng(0).uniform(0, 1, (3, 16, 16, 3)).astype(np.float32)
        before = predict(net, x)
        _, loaded = self.roundtrip(tmp_path, Checkpoint.capture(net))
        np.testing.assert_array_equal(before, predict(loaded.restore_network(), x))

    def test_save_load_save_byte_identical(self, tmp_path):
        net = build_network(SMALL, seed=5)
        p1, loaded = self.roundtrip(tmp_path, Checkpoint.capture(
            net, train_config=TrainConfig(), step=3, fold_id=2))
        p2 = tmp_path / "again.ckpt"
        save_checkpoint(p2, loaded)
        assert p1.read_bytes() == p2.read_bytes()

    def test_truncated_file_is_corruption_error(self, tmp_path):
        net = build_network(SMALL, seed=5)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, Checkpoint.capture(net))
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) - 64])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"not a checkpoint\x00\x01")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_adam_moments_roundtrip(self, tmp_path):
        net = build_network(SMALL, seed=5)
        params = [t for _, t in net.params()]
        state = AdamState.zeros_like(params)
        rng = np.random.default_rng(0)
        adam_step(params, [rng.normal(size=p.data.shape).astype(np.float32)
                           for p in params], state, TrainConfig(), step=1)
        _, loaded = self.roundtrip(tmp_path, Checkpoint.capture(net, adam=state, step=1))
        for a, b in zip(state.m, loaded.adam.m):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(state.v, loaded.adam.v):
            np.testing.assert_array_equal(a, b)

    def test_training_progress_changes_file(self, tmp_path):
        ds = tiny_dataset(n_train=2, n_val=2)
        net = build_network(SMALL, seed=0)
        fold = make_folds(2, 2, 1)[0]
        p1 = tmp_path / "before.ckpt"
        save_checkpoint(p1, Checkpoint.capture(net))
        train(net, fold, ds, TrainConfig(epochs=1, batch_size=4, seed=0))
        p2 = tmp_path / "after.ckpt"
        save_checkpoint(p2, Checkpoint.capture(net))
        assert p1.read_bytes() != p2.read_bytes()


class TestTrace:
    def test_csv_roundtrip_exact(self, tmp_path):
        rows = [
            TraceRow(1, 0.6931471805599453, 0.5, 1.0, 0.0, 0.6666666666666666, 0.43),
            TraceRow(2, 0.25, None, None, None, None, None),
        ]
        path = tmp_path / "trace.csv"
        write_trace(path, rows)
        assert read_trace(path) == rows

    def test_header_enforced(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            read_trace(path)
