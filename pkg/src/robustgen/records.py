"""Experiment records, hyperparameter configs and the append-only JSONL record store."""

import hashlib
import json
import logging
import os
import threading
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Optional, Union

logger = logging.getLogger(__name__)

AXES = ("learning_rate", "depth", "width", "dataset_id", "train_size")
RECORD_SCHEMA_VERSION = 1

CONVERGED = "converged"
FAILED = "failed"


class StoreError(ValueError):
    """Raised when the record store contains a malformed line."""

    def __init__(self, message: str, line: Optional[int] = None):
        if line is not None:
            message = f"{message} (line {line})"
        super().__init__(message)
        self.line = line


def derive_seed(*parts: Any) -> int:
    """Derive an independent 64-bit RNG seed from any hashable description."""
    digest = hashlib.sha256(repr(parts).encode("utf-8")).hexdigest()
    return int(digest[:16], 16)


@dataclass(frozen=True, order=True)
class HyperparameterConfig:
    """One point of the hyperparameter grid."""

    learning_rate: float
    depth: int
    width: int
    dataset_id: str
    train_size: int

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.depth < 1 or self.width < 1 or self.train_size < 1:
            raise ValueError("depth, width and train_size must be positive")
        object.__setattr__(self, "learning_rate", float(self.learning_rate))
        object.__setattr__(self, "dataset_id", str(self.dataset_id))

    def value(self, axis: str) -> Any:
        if axis not in AXES:
            raise ValueError(f"Unknown hyperparameter axis: {axis}")
        return getattr(self, axis)

    def complement(self, axis: str) -> tuple[tuple[str, Any], ...]:
        """The (axis, value) pairs of every axis except ``axis``."""
        return tuple((other, self.value(other)) for other in AXES if other != axis)

    def differing_axes(self, other: "HyperparameterConfig") -> list[str]:
        return [axis for axis in AXES if self.value(axis) != other.value(axis)]

    @property
    def config_id(self) -> str:
        return (
            f"lr={self.learning_rate!r}_depth={self.depth}_width={self.width}"
            f"_data={self.dataset_id}_n={self.train_size}"
        )

    def to_dict(self) -> dict[str, Any]:
        return {axis: self.value(axis) for axis in AXES}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "HyperparameterConfig":
        return cls(
            learning_rate=float(data["learning_rate"]),
            depth=int(data["depth"]),
            width=int(data["width"]),
            dataset_id=str(data["dataset_id"]),
            train_size=int(data["train_size"]),
        )


@dataclass(frozen=True)
class ExperimentRecord:
    """One completed run: config, seed, errors, gap and measure vector."""

    config: HyperparameterConfig
    seed: int
    train_error: float
    test_error: float
    final_cross_entropy: Optional[float]
    test_set_size: int
    train_set_size: int
    status: str
    epochs: int = 0
    measures: dict[str, Optional[float]] = field(default_factory=dict)
    checkpoint: Optional[str] = None
    gap: float = field(init=False)

    def __post_init__(self):
        if self.status not in (CONVERGED, FAILED):
            raise ValueError(f"Unknown record status: {self.status}")
        object.__setattr__(self, "gap", self.test_error - self.train_error)

    @property
    def key(self) -> tuple[str, int]:
        return (self.config.config_id, self.seed)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED

    def measure(self, measure_id: str) -> Optional[float]:
        return self.measures.get(measure_id)

    def with_measures(self, measures: dict[str, Optional[float]]) -> "ExperimentRecord":
        return replace(self, measures=dict(measures))

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": RECORD_SCHEMA_VERSION,
            "config": self.config.to_dict(),
            "seed": self.seed,
            "train_error": self.train_error,
            "test_error": self.test_error,
            "gap": self.gap,
            "final_cross_entropy": self.final_cross_entropy,
            "test_set_size": self.test_set_size,
            "train_set_size": self.train_set_size,
            "status": self.status,
            "epochs": self.epochs,
            "measures": dict(self.measures),
            "checkpoint": self.checkpoint,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentRecord":
        return cls(
            config=HyperparameterConfig.from_dict(data["config"]),
            seed=int(data["seed"]),
            train_error=float(data["train_error"]),
            test_error=float(data["test_error"]),
            final_cross_entropy=data.get("final_cross_entropy"),
            test_set_size=int(data["test_set_size"]),
            train_set_size=int(data["train_set_size"]),
            status=data["status"],
            epochs=int(data.get("epochs", 0)),
            measures={
                key: (None if value is None else float(value))
                for key, value in (data.get("measures") or {}).items()
            },
            checkpoint=data.get("checkpoint"),
        )


def deduplicate(records: Iterable[ExperimentRecord]) -> list[ExperimentRecord]:
    """Keep the last record for each (config, seed), preserving first-seen order."""
    latest: dict[tuple[str, int], ExperimentRecord] = {}
    duplicates = 0
    for record in records:
        if record.key in latest:
            duplicates += 1
        latest[record.key] = record
    if duplicates:
        logger.warning("Dropped %d duplicate (config, seed) record(s)", duplicates)
    return list(latest.values())


class RecordStore:
    """Append-only JSON Lines store; one ExperimentRecord per line."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()

    @property
    def directory(self) -> Path:
        return self.path.parent

    def exists(self) -> bool:
        return self.path.exists()

    def load(self) -> list[ExperimentRecord]:
        if not self.path.exists():
            return []
        records = []
        with open(self.path, "r", encoding="utf-8") as f:
            for number, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    data = json.loads(line)
                except json.JSONDecodeError as e:
                    raise StoreError(f"invalid JSON in record store: {e.msg}", line=number) from e
                if data.get("schema_version") != RECORD_SCHEMA_VERSION:
                    raise StoreError(
                        f"unsupported record schema {data.get('schema_version')!r}", line=number
                    )
                try:
                    records.append(ExperimentRecord.from_dict(data))
                except (KeyError, TypeError, ValueError) as e:
                    raise StoreError(f"malformed record: {e}", line=number) from e
        return deduplicate(records)

    def completed_keys(self) -> set[tuple[str, int]]:
        return {record.key for record in self.load()}

    def append(self, record: ExperimentRecord) -> None:
        line = json.dumps(record.to_dict(), sort_keys=True, allow_nan=False)
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as f:
                f.write(line + "\n")

    def rewrite(self, records: Iterable[ExperimentRecord]) -> None:
        """Atomically replace the store contents (used to write back measure vectors)."""
        lines = [
            json.dumps(record.to_dict(), sort_keys=True, allow_nan=False) for record in records
        ]
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            tmp_path = self.path.with_suffix(self.path.suffix + ".tmp")
            tmp_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
            os.replace(tmp_path, self.path)
