"""Tests for trainer module."""

import numpy as np
import pytest

from robustgen.nn_core import DENSE, Layer, LayerSpec, Network, flat_params
from robustgen.records import CONVERGED, FAILED, HyperparameterConfig, RecordStore
from robustgen.trainer import (
    EXTERNAL_FILE,
    GAUSSIAN_BLOBS,
    TEACHER_NETWORK,
    Dataset,
    DatasetSpec,
    IngestionError,
    TrainingSettings,
    build_network,
    evaluate_error,
    expand_grid,
    filter_records,
    make_dataset,
    run_grid,
    teacher_network,
    train,
)

TEACHER = DatasetSpec(TEACHER_NETWORK, input_dim=4, num_classes=2, generator_seed=3)
TINY_SETTINGS = TrainingSettings(max_epochs=5, batch_size=16, test_size=50)


def tiny_grid(**overrides):
    grid = {
        "learning_rate": [0.01],
        "depth": [1, 2],
        "width": [4],
        "dataset_id": ["teacher"],
        "train_size": [16],
    }
    grid.update(overrides)
    return grid


def separable_set(n=64, seed=0):
    """Two tight clusters at (-2, -2) and (2, 2)."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = np.where(y[:, None] == 1, 2.0, -2.0) + 0.3 * rng.standard_normal((n, 2))
    return Dataset(x, y, 2)


def dense_net(weight, bias=None):
    weight = np.asarray(weight, dtype=float)
    spec = LayerSpec(DENSE, weight.shape[1], weight.shape[0], has_bias=bias is not None)
    return Network((Layer(spec, weight, bias),))


class TestMakeDataset:
    """Test dataset generation and ingestion."""

    def test_deterministic(self):
        first = make_dataset(TEACHER, 32, 20, seed=5)
        second = make_dataset(TEACHER, 32, 20, seed=5)
        for a, b in zip(first, second):
            np.testing.assert_array_equal(a.x, b.x)
            np.testing.assert_array_equal(a.y, b.y)

    def test_sizes_and_labels(self):
        train_set, test_set = make_dataset(TEACHER, 32, 20, seed=0)
        assert len(train_set) == 32 and len(test_set) == 20
        assert set(np.unique(train_set.y)) <= {0, 1}

    def test_test_set_shared_across_seeds(self):
        _, test_a = make_dataset(TEACHER, 32, 20, seed=0)
        train_b, test_b = make_dataset(TEACHER, 64, 20, seed=1)
        np.testing.assert_array_equal(test_a.x, test_b.x)
        assert len(train_b) == 64

    def test_teacher_labels_are_teacher_argmax(self):
        train_set, _ = make_dataset(TEACHER, 100, 10, seed=0)
        assert evaluate_error(teacher_network(TEACHER), train_set) == 0.0

    def test_label_noise_changes_labels(self):
        noisy = DatasetSpec(TEACHER_NETWORK, input_dim=4, num_classes=2, noise_level=0.5)
        train_set, _ = make_dataset(noisy, 200, 10, seed=0)
        assert evaluate_error(teacher_network(noisy), train_set) > 0.05

    def test_blobs_are_linearly_learnable(self):
        spec = DatasetSpec(GAUSSIAN_BLOBS, input_dim=8, num_classes=2, separation=6.0)
        train_set, test_set = make_dataset(spec, 200, 500, seed=0)
        config = HyperparameterConfig(0.05, 1, 4, "blobs", 200)
        net = build_network(config, 0, input_dim=8, num_classes=2)
        trained, _ = train(net, train_set, 0.05, max_epochs=100, batch_size=20)
        assert evaluate_error(trained, test_set) < 0.05

    def test_external_file(self, tmp_path):
        path = tmp_path / "data.csv"
        rows = [f"{i},{-i},{i % 3}" for i in range(30)]
        path.write_text("\n".join(rows) + "\n")
        spec = DatasetSpec(EXTERNAL_FILE, input_dim=2, num_classes=3, path=str(path))
        train_set, test_set = make_dataset(spec, 10, 15, seed=0)
        assert len(train_set) == 10 and len(test_set) == 15
        assert not set(train_set.x[:, 0]) & set(test_set.x[:, 0])

    def test_external_file_missing(self, tmp_path):
        spec = DatasetSpec(EXTERNAL_FILE, 2, 2, path=str(tmp_path / "missing.csv"))
        with pytest.raises(IngestionError):
            make_dataset(spec, 5, 5, seed=0)

    def test_external_file_wrong_columns(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("1,2,3,0\n4,5,6,1\n")
        spec = DatasetSpec(EXTERNAL_FILE, input_dim=2, num_classes=2, path=str(path))
        with pytest.raises(IngestionError):
            make_dataset(spec, 1, 1, seed=0)

    def test_external_file_bad_labels(self, tmp_path):
        path = tmp_path / "data.csv"
        path.write_text("1,2,0\n4,5,7\n")
        spec = DatasetSpec(EXTERNAL_FILE, input_dim=2, num_classes=2, path=str(path))
        with pytest.raises(IngestionError):
            make_dataset(spec, 1, 1, seed=0)

    def test_unknown_spec_field(self):
        with pytest.raises(ValueError):
            DatasetSpec.from_dict({"kind": TEACHER_NETWORK, "input_dim": 2, "num_classes": 2,
                                   "colour": "red"})


class TestBuildNetwork:
    """Test network construction."""

    def test_shapes(self):
        config = HyperparameterConfig(0.01, 2, 8, "teacher", 64)
        net = build_network(config, 0, input_dim=16, num_classes=4)
        assert [layer.weight.shape for layer in net.layers] == [(8, 16), (4, 8)]

    def test_seeds_give_different_weights(self):
        config = HyperparameterConfig(0.01, 3, 8, "teacher", 64)
        a = build_network(config, 0, input_dim=4, num_classes=2)
        b = build_network(config, 1, input_dim=4, num_classes=2)
        assert [la.weight.shape for la in a.layers] == [lb.weight.shape for lb in b.layers]
        assert not np.array_equal(flat_params(a), flat_params(b))

    def test_depth_one(self):
        config = HyperparameterConfig(0.01, 1, 8, "teacher", 64)
        net = build_network(config, 0, input_dim=4, num_classes=3)
        assert net.depth == 1
        assert net.layers[0].weight.shape == (3, 4)


class TestTrain:
    """Test SGD training."""

    def test_separable_data_converges(self):
        train_set = separable_set()
        config = HyperparameterConfig(0.05, 2, 16, "sep", 64)
        net = build_network(config, 0, input_dim=2, num_classes=2)
        trained, result = train(net, train_set, 0.05, max_epochs=500, batch_size=16, seed=1)
        assert result.status == CONVERGED
        assert result.train_error == 0.0
        assert result.final_cross_entropy <= 0.01
        assert evaluate_error(trained, train_set) == 0.0

    def test_divergence_marks_failed(self):
        base = separable_set()
        huge = Dataset(base.x * 1e150, base.y, 2)
        config = HyperparameterConfig(1e3, 2, 16, "sep", 64)
        net = build_network(config, 0, input_dim=2, num_classes=2)
        trained, result = train(net, huge, 1e3, max_epochs=20, batch_size=16)
        assert result.status == FAILED
        assert result.diverged
        assert result.final_cross_entropy is None
        assert np.all(np.isfinite(flat_params(trained)))

    def test_already_fitted_net_stops_immediately(self):
        data = Dataset(np.eye(2), np.array([0, 1]), 2)
        net = dense_net(100.0 * np.eye(2))
        trained, result = train(net, data, 0.1)
        assert result.epochs == 0
        assert result.status == CONVERGED
        np.testing.assert_array_equal(flat_params(trained), flat_params(net))

    def test_epoch_cap_marks_failed(self):
        train_set = separable_set()
        config = HyperparameterConfig(1e-6, 2, 4, "sep", 64)
        net = build_network(config, 0, input_dim=2, num_classes=2)
        _, result = train(net, train_set, 1e-6, max_epochs=2)
        assert result.status == FAILED
        assert result.epochs == 2

    def test_invalid_learning_rate(self):
        with pytest.raises(ValueError):
            train(dense_net(np.eye(2)), separable_set(), 0.0)


class TestEvaluateError:
    """Test evaluate_error."""

    def test_constant_logits_on_balanced_four_classes(self):
        data = Dataset(np.ones((8, 3)), np.arange(8) % 4, 4)
        net = dense_net(np.zeros((4, 3)), bias=np.zeros(4))
        assert evaluate_error(net, data) == 0.75

    def test_all_wrong(self):
        data = Dataset(np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([1, 0]), 2)
        assert evaluate_error(dense_net(np.eye(2)), data) == 1.0

    def test_empty_dataset(self):
        data = Dataset(np.zeros((0, 2)), np.zeros(0, dtype=np.int64), 2)
        with pytest.raises(ValueError):
            evaluate_error(dense_net(np.eye(2)), data)


class TestRunGrid:
    """Test sweeps over the grid."""

    def test_one_record_per_config_and_seed(self, tmp_path):
        store = RecordStore(tmp_path / "records.jsonl")
        new = run_grid(tiny_grid(), {"teacher": TEACHER}, store, num_seeds=3,
                       settings=TINY_SETTINGS)
        assert len(new) == 6
        assert len(store.load()) == 6
        for record in new:
            assert record.gap == record.test_error - record.train_error
            assert (tmp_path / record.checkpoint).exists()

    def test_rerun_is_resumable(self, tmp_path):
        store = RecordStore(tmp_path / "records.jsonl")
        run_grid(tiny_grid(), {"teacher": TEACHER}, store, num_seeds=2, settings=TINY_SETTINGS)
        again = run_grid(tiny_grid(), {"teacher": TEACHER}, store, num_seeds=2,
                         settings=TINY_SETTINGS)
        assert again == []
        assert len(store.load()) == 4

    def test_reproducible_records(self, tmp_path):
        dumps = []
        for name in ("a", "b"):
            store = RecordStore(tmp_path / name / "records.jsonl")
            run_grid(tiny_grid(), {"teacher": TEACHER}, store, num_seeds=2,
                     settings=TINY_SETTINGS)
            dumps.append([record.to_dict() for record in store.load()])
        assert dumps[0] == dumps[1]

    def test_more_clean_data_lowers_test_error(self, tmp_path):
        store = RecordStore(tmp_path / "records.jsonl")
        grid = tiny_grid(learning_rate=[0.05], depth=[2], width=[32],
                         train_size=[16, 128, 1024])
        settings = TrainingSettings(max_epochs=100, batch_size=32, test_size=1000)
        records = run_grid(grid, {"teacher": TEACHER}, store, num_seeds=4, settings=settings)

        means = [
            np.mean([r.test_error for r in records if r.config.train_size == size])
            for size in (16, 128, 1024)
        ]
        assert means == sorted(means, reverse=True)

    def test_bad_dataset_does_not_abort_sweep(self, tmp_path, caplog):
        short = tmp_path / "short.csv"
        short.write_text("0.0,1.0,0\n1.0,0.0,1\n")
        specs = {
            "bad": DatasetSpec(EXTERNAL_FILE, input_dim=2, num_classes=2, path=str(short)),
            "good": DatasetSpec(GAUSSIAN_BLOBS, input_dim=2, num_classes=2, separation=6.0),
        }
        store = RecordStore(tmp_path / "records.jsonl")
        grid = tiny_grid(depth=[1], dataset_id=["bad", "good"])
        new = run_grid(grid, specs, store, num_seeds=2, settings=TINY_SETTINGS)
        assert [(r.config.dataset_id, r.seed) for r in new] == [("good", 0), ("good", 1)]
        assert len(store.load()) == 2
        assert "seed 0 failed" in caplog.text
        assert "seed 1 failed" in caplog.text

    def test_bad_dataset_with_workers(self, tmp_path):
        specs = {
            "bad": DatasetSpec(EXTERNAL_FILE, 2, 2, path=str(tmp_path / "missing.csv")),
            "teacher": TEACHER,
        }
        store = RecordStore(tmp_path / "records.jsonl")
        grid = tiny_grid(depth=[1], dataset_id=["bad", "teacher"])
        new = run_grid(grid, specs, store, num_seeds=2, settings=TINY_SETTINGS, workers=2)
        assert {r.config.dataset_id for r in new} == {"teacher"}
        assert len(new) == 2

    def test_empty_grid_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            run_grid([], {"teacher": TEACHER}, RecordStore(tmp_path / "r.jsonl"))

    def test_expand_grid_counts(self):
        grid = tiny_grid(width=[4, 8, 16])
        assert len(expand_grid(grid)) == 6


class TestFilterRecords:
    """Test filter_records."""

    def run_records(self, tmp_path):
        store = RecordStore(tmp_path / "records.jsonl")
        return run_grid(tiny_grid(), {"teacher": TEACHER}, store, num_seeds=2,
                        settings=TINY_SETTINGS)

    def test_mixed(self, tmp_path):
        from dataclasses import replace

        records = self.run_records(tmp_path)
        records = [replace(r, status=CONVERGED if i % 2 else FAILED)
                   for i, r in enumerate(records)]
        kept = filter_records(records)
        assert kept == [r for r in records if r.status == CONVERGED]

    def test_all_failed_warns(self, tmp_path, caplog):
        from dataclasses import replace

        records = [replace(r, status=FAILED) for r in self.run_records(tmp_path)]
        with caplog.at_level("WARNING"):
            assert filter_records(records) == []
        assert "failed" in caplog.text

    def test_all_converged_is_identity(self, tmp_path):
        from dataclasses import replace

        records = [replace(r, status=CONVERGED) for r in self.run_records(tmp_path)]
        assert filter_records(records) == records
