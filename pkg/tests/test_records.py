"""Tests for records module."""

import json

import pytest

from robustgen.records import (
    CONVERGED,
    FAILED,
    ExperimentRecord,
    HyperparameterConfig,
    RecordStore,
    StoreError,
    deduplicate,
    derive_seed,
)


def make_config(**overrides):
    values = {
        "learning_rate": 0.01,
        "depth": 2,
        "width": 16,
        "dataset_id": "teacher",
        "train_size": 128,
    }
    values.update(overrides)
    return HyperparameterConfig(**values)


def make_record(seed=0, train_error=0.0, test_error=0.2, status=CONVERGED, **config):
    return ExperimentRecord(
        config=make_config(**config),
        seed=seed,
        train_error=train_error,
        test_error=test_error,
        final_cross_entropy=0.009,
        test_set_size=1000,
        train_set_size=128,
        status=status,
        measures={"params": 1.5, "inverse.margin": None},
    )


class TestHyperparameterConfig:
    """Test HyperparameterConfig."""

    def test_configs_are_hashable_and_ordered(self):
        a, b = make_config(depth=2), make_config(depth=3)
        assert len({a, b, make_config(depth=2)}) == 2
        assert sorted([b, a]) == [a, b]

    def test_differing_axes(self):
        a = make_config()
        assert a.differing_axes(make_config(width=32)) == ["width"]
        assert a.differing_axes(a) == []

    def test_complement_omits_axis(self):
        complement = dict(make_config().complement("depth"))
        assert "depth" not in complement
        assert complement["width"] == 16

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            make_config(learning_rate=0)
        with pytest.raises(ValueError):
            make_config(depth=0)

    def test_unknown_axis(self):
        with pytest.raises(ValueError):
            make_config().value("momentum")

    def test_dict_round_trip(self):
        config = make_config(learning_rate=0.005)
        assert HyperparameterConfig.from_dict(config.to_dict()) == config


class TestExperimentRecord:
    """Test ExperimentRecord."""

    def test_gap_is_test_minus_train(self):
        record = make_record(train_error=0.01, test_error=0.31)
        assert record.gap == 0.31 - 0.01

    def test_unknown_status_rejected(self):
        with pytest.raises(ValueError):
            make_record(status="running")

    def test_measure_lookup(self):
        record = make_record()
        assert record.measure("params") == 1.5
        assert record.measure("inverse.margin") is None
        assert record.measure("path.norm") is None

    def test_dict_round_trip_keeps_none(self):
        record = make_record()
        restored = ExperimentRecord.from_dict(json.loads(json.dumps(record.to_dict())))
        assert restored == record
        assert restored.measures["inverse.margin"] is None

    def test_with_measures_returns_copy(self):
        record = make_record()
        updated = record.with_measures({"params": 2.0})
        assert updated.measures == {"params": 2.0}
        assert record.measures["params"] == 1.5


class TestDeriveSeed:
    """Test derive_seed."""

    def test_deterministic_and_distinct(self):
        assert derive_seed("a", 1) == derive_seed("a", 1)
        assert derive_seed("a", 1) != derive_seed("a", 2)
        assert 0 <= derive_seed("x") < 2**64


class TestRecordStore:
    """Test the JSON Lines record store."""

    def test_missing_store_is_empty(self, tmp_path):
        store = RecordStore(tmp_path / "runs" / "records.jsonl")
        assert not store.exists()
        assert store.load() == []

    def test_append_and_load(self, tmp_path):
        store = RecordStore(tmp_path / "runs" / "records.jsonl")
        store.append(make_record(seed=0))
        store.append(make_record(seed=1, status=FAILED))
        records = store.load()
        assert [r.seed for r in records] == [0, 1]
        config_id = records[0].config.config_id
        assert store.completed_keys() == {(config_id, 0), (config_id, 1)}

    def test_duplicates_keep_latest(self, tmp_path, caplog):
        store = RecordStore(tmp_path / "records.jsonl")
        store.append(make_record(seed=0, test_error=0.2))
        store.append(make_record(seed=0, test_error=0.4))
        with caplog.at_level("WARNING"):
            records = store.load()
        assert len(records) == 1
        assert records[0].test_error == 0.4
        assert "duplicate" in caplog.text

    def test_malformed_line_reports_line_number(self, tmp_path):
        path = tmp_path / "records.jsonl"
        store = RecordStore(path)
        store.append(make_record())
        with open(path, "a") as f:
            f.write("{not json\n")
        with pytest.raises(StoreError) as excinfo:
            store.load()
        assert excinfo.value.line == 2

    def test_schema_version_checked(self, tmp_path):
        path = tmp_path / "records.jsonl"
        data = make_record().to_dict()
        data["schema_version"] = 42
        path.write_text(json.dumps(data) + "\n")
        with pytest.raises(StoreError):
            RecordStore(path).load()

    def test_rewrite_replaces_contents(self, tmp_path):
        store = RecordStore(tmp_path / "records.jsonl")
        store.append(make_record(seed=0))
        store.rewrite([make_record(seed=5)])
        assert [r.seed for r in store.load()] == [5]
        assert not (tmp_path / "records.jsonl.tmp").exists()

    def test_deduplicate_preserves_first_seen_order(self):
        records = [make_record(seed=1), make_record(seed=0), make_record(seed=1, test_error=0.5)]
        assert [(r.seed, r.test_error) for r in deduplicate(records)] == [(1, 0.5), (0, 0.2)]
