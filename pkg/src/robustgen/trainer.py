"""Experiment generation: datasets, network construction, SGD training and grid sweeps."""

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from functools import partial
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from .nn_core import DENSE, Checkpoint, Layer, LayerSpec, Network, forward, save_checkpoint
from .records import (
    AXES,
    CONVERGED,
    FAILED,
    ExperimentRecord,
    HyperparameterConfig,
    RecordStore,
    derive_seed,
)

logger = logging.getLogger(__name__)

TEACHER_NETWORK = "teacher_network"
GAUSSIAN_BLOBS = "gaussian_blobs"
EXTERNAL_FILE = "external_file"
DATASET_KINDS = (TEACHER_NETWORK, GAUSSIAN_BLOBS, EXTERNAL_FILE)
JOB_ERRORS = (ValueError, OSError, RuntimeError, ArithmeticError)


class IngestionError(ValueError):
    """Raised when an external dataset file is missing or ill-formed."""


@dataclass(frozen=True)
class DatasetSpec:
    """How to generate (or load) one dataset of the grid's dataset axis."""

    kind: str
    input_dim: int
    num_classes: int
    noise_level: float = 0.0
    generator_seed: int = 0
    path: Optional[str] = None
    separation: float = 3.0
    teacher_width: int = 32

    def __post_init__(self):
        if self.kind not in DATASET_KINDS:
            raise ValueError(f"Unsupported dataset kind: {self.kind}")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("input_dim must be positive and num_classes at least 2")
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError("noise_level must lie in [0, 1]")
        if self.kind == EXTERNAL_FILE and not self.path:
            raise ValueError("external_file datasets need a path")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "DatasetSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown dataset fields: {', '.join(sorted(unknown))}")
        return cls(**dict(data))


@dataclass(frozen=True, eq=False)
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int

    def __len__(self) -> int:
        return int(self.y.shape[0])


@dataclass(frozen=True)
class TrainingSettings:
    momentum: float = 0.9
    ce_target: float = 0.01
    max_epochs: int = 2000
    batch_size: int = 32
    test_size: int = 10000
    min_train_accuracy: float = 0.99


@dataclass(frozen=True)
class TrainResult:
    train_error: float
    train_accuracy: float
    final_cross_entropy: Optional[float]
    epochs: int
    status: str
    diverged: bool = False


def he_layer(spec: LayerSpec, rng: np.random.Generator) -> Layer:
    """Fan-in scaled Gaussian weights, zero bias."""
    fan_in = spec.fan_in * (spec.kernel_size**2 if spec.kernel_size else 1)
    weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=spec.weight_shape)
    return Layer(spec, weight, np.zeros(spec.fan_out) if spec.has_bias else None)


def mlp_specs(input_dim: int, width: int, depth: int, num_classes: int) -> list[LayerSpec]:
    sizes = [input_dim] + [width] * (depth - 1) + [num_classes]
    return [LayerSpec(DENSE, fan_in, fan_out) for fan_in, fan_out in zip(sizes, sizes[1:])]


def teacher_network(spec: DatasetSpec) -> Network:
    """The fixed random ReLU network whose argmax labels teacher_network data."""
    rng = np.random.default_rng(derive_seed("teacher", spec.generator_seed))
    specs = mlp_specs(spec.input_dim, spec.teacher_width, 2, spec.num_classes)
    return Network(tuple(he_layer(layer_spec, rng) for layer_spec in specs))


def _flip_labels(y: np.ndarray, spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.noise_level == 0.0:
        return y
    flip = rng.random(y.shape[0]) < spec.noise_level
    return np.where(flip, rng.integers(0, spec.num_classes, size=y.shape[0]), y)


def _synthetic(spec: DatasetSpec, size: int, rng: np.random.Generator) -> Dataset:
    if spec.kind == TEACHER_NETWORK:
        x = rng.standard_normal((size, spec.input_dim))
        y = np.argmax(forward(teacher_network(spec), x), axis=1)
    else:
        means_rng = np.random.default_rng(derive_seed("blobs", spec.generator_seed))
        means = means_rng.standard_normal((spec.num_classes, spec.input_dim))
        means *= spec.separation / np.linalg.norm(means, axis=1, keepdims=True)
        y = rng.permutation(np.arange(size) % spec.num_classes)
        x = means[y] + rng.standard_normal((size, spec.input_dim))
    y = _flip_labels(y, spec, rng)
    return Dataset(x, y.astype(np.int64), spec.num_classes)


def _load_external(spec: DatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    try:
        table = np.loadtxt(spec.path, delimiter=",", ndmin=2, comments="#")
    except OSError as e:
        raise IngestionError(f"Cannot read dataset file {spec.path}: {e}") from e
    except ValueError as e:
        raise IngestionError(f"Dataset file {spec.path} is not numeric CSV: {e}") from e
    if table.shape[1] != spec.input_dim + 1:
        raise IngestionError(
            f"Dataset file {spec.path} has {table.shape[1]} columns, "
            f"expected {spec.input_dim} features plus a label"
        )
    labels = table[:, -1]
    in_range = labels.min() >= 0 and labels.max() < spec.num_classes
    if not in_range or not np.all(labels == np.round(labels)):
        raise IngestionError(
            f"Dataset file {spec.path} has labels outside 0..{spec.num_classes - 1}"
        )
    return table[:, :-1], labels.astype(np.int64)


def make_dataset(
    spec: DatasetSpec, train_size: int, test_size: int, seed: int
) -> tuple[Dataset, Dataset]:
    """
    Build disjoint (train, test) sets.

    The test set depends only on the dataset spec, so every train size and seed is scored
    against the same test set; the train set depends on ``seed`` as well.
    """
    if train_size < 1 or test_size < 1:
        raise ValueError("train_size and test_size must be positive")

    if spec.kind != EXTERNAL_FILE:
        test_rng = np.random.default_rng(derive_seed("test", spec.generator_seed, test_size))
        train_rng = np.random.default_rng(derive_seed("train", spec.generator_seed, seed))
        return _synthetic(spec, train_size, train_rng), _synthetic(spec, test_size, test_rng)

    x, y = _load_external(spec)
    if x.shape[0] < train_size + test_size:
        raise IngestionError(
            f"Dataset file {spec.path} has {x.shape[0]} rows, "
            f"need {train_size + test_size} for the requested split"
        )
    order = np.random.default_rng(derive_seed("split", spec.generator_seed)).permutation(len(y))
    test_idx, pool = order[:test_size], order[test_size:]
    train_idx = np.random.default_rng(derive_seed("train", spec.generator_seed, seed)).choice(
        pool, size=train_size, replace=False
    )
    return (
        Dataset(x[train_idx], y[train_idx], spec.num_classes),
        Dataset(x[test_idx], y[test_idx], spec.num_classes),
    )


def build_network(
    config: HyperparameterConfig, seed: int, *, input_dim: int, num_classes: int
) -> Network:
    """Fully-connected ReLU net with ``depth`` weight layers of ``width`` hidden units."""
    rng = np.random.default_rng(derive_seed("init", config.config_id, seed))
    specs = mlp_specs(input_dim, config.width, config.depth, num_classes)
    return Network(tuple(he_layer(spec, rng) for spec in specs))


def _forward_cache(weights, biases, x):
    activations = [x]
    pre_activations = []
    last = len(weights) - 1
    for index, (w, b) in enumerate(zip(weights, biases)):
        z = activations[-1] @ w.T
        if b is not None:
            z = z + b
        pre_activations.append(z)
        activations.append(np.maximum(z, 0.0) if index < last else z)
    return activations, pre_activations


def _cross_entropy_and_grad(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    lse = logsumexp(logits, axis=1)
    rows = np.arange(y.shape[0])
    loss = float(np.mean(lse - logits[rows, y]))
    probs = np.exp(logits - lse[:, np.newaxis])
    probs[rows, y] -= 1.0
    return loss, probs / y.shape[0]


def cross_entropy(net: Network, dataset: Dataset) -> float:
    logits = forward(net, dataset.x)
    rows = np.arange(len(dataset))
    return float(np.mean(logsumexp(logits, axis=1) - logits[rows, dataset.y]))


def evaluate_error(net: Network, dataset: Dataset) -> float:
    """Fraction of argmax mispredictions; ties go to the lowest class index."""
    if len(dataset) == 0:
        raise ValueError("Cannot evaluate the error of an empty dataset")
    predictions = np.argmax(forward(net, dataset.x), axis=1)
    return float(np.mean(predictions != dataset.y))


def _full_pass(weights, biases, dataset: Dataset) -> tuple[float, float]:
    activations, _ = _forward_cache(weights, biases, dataset.x)
    logits = activations[-1]
    if not np.all(np.isfinite(logits)):
        return float("nan"), 0.0
    loss, _ = _cross_entropy_and_grad(logits, dataset.y)
    accuracy = float(np.mean(np.argmax(logits, axis=1) == dataset.y))
    return loss, accuracy


def _snapshot(net: Network, weights, biases) -> Network:
    layers = tuple(Layer(layer.spec, w, b) for layer, w, b in zip(net.layers, weights, biases))
    return Network(layers, net.init_layers)


def train(
    net: Network,
    train_set: Dataset,
    learning_rate: float,
    momentum: float = 0.9,
    ce_target: float = 0.01,
    max_epochs: int = 2000,
    batch_size: int = 32,
    seed: int = 0,
    min_train_accuracy: float = 0.99,
) -> tuple[Network, TrainResult]:
    """
    Minibatch SGD with classical momentum on cross-entropy, until the full-train-set
    cross-entropy reaches ``ce_target``.

    No learning-rate decay and no weight decay. The stopping check runs before every epoch
    (so an already-fitted net performs zero updates). A non-finite loss marks the run failed
    and returns the last finite weights.
    """
    if learning_rate <= 0 or ce_target <= 0:
        raise ValueError("learning_rate and ce_target must be positive")
    if any(layer.spec.kind != DENSE for layer in net.layers):
        raise ValueError("training supports dense layers only")

    weights = [np.array(layer.weight) for layer in net.layers]
    biases = [None if layer.bias is None else np.array(layer.bias) for layer in net.layers]
    vel_w = [np.zeros_like(w) for w in weights]
    vel_b = [None if b is None else np.zeros_like(b) for b in biases]
    rng = np.random.default_rng(seed)
    n = len(train_set)
    last_finite = net
    diverged = False
    epochs = 0
    loss, accuracy = float("nan"), 0.0

    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        while True:
            loss, accuracy = _full_pass(weights, biases, train_set)
            if not np.isfinite(loss):
                diverged = True
                break
            last_finite = _snapshot(net, weights, biases)
            if loss <= ce_target or epochs >= max_epochs:
                break

            order = rng.permutation(n)
            for start in range(0, n, batch_size):
                batch = order[start : start + batch_size]
                activations, pre = _forward_cache(weights, biases, train_set.x[batch])
                _, delta = _cross_entropy_and_grad(activations[-1], train_set.y[batch])
                for index in range(len(weights) - 1, -1, -1):
                    grad_w = delta.T @ activations[index]
                    grad_b = delta.sum(axis=0)
                    if index > 0:
                        delta = (delta @ weights[index]) * (pre[index - 1] > 0)
                    vel_w[index] = momentum * vel_w[index] - learning_rate * grad_w
                    weights[index] += vel_w[index]
                    if biases[index] is not None:
                        vel_b[index] = momentum * vel_b[index] - learning_rate * grad_b
                        biases[index] += vel_b[index]
            epochs += 1
            if not all(np.all(np.isfinite(w)) for w in weights):
                diverged = True
                break

    if diverged:
        logger.info("Training diverged after %d epoch(s)", epochs)
        error = 1.0 - _full_pass(
            [layer.weight for layer in last_finite.layers],
            [layer.bias for layer in last_finite.layers],
            train_set,
        )[1]
        return last_finite, TrainResult(error, 1.0 - error, None, epochs, FAILED, diverged=True)

    converged = loss <= ce_target and accuracy >= min_train_accuracy
    status = CONVERGED if converged else FAILED
    return last_finite, TrainResult(1.0 - accuracy, accuracy, loss, epochs, status)


def expand_grid(grid: Mapping[str, Sequence[Any]]) -> list[HyperparameterConfig]:
    """Cartesian product of the axis values, in axis order."""
    missing = [axis for axis in AXES if axis not in grid]
    if missing:
        raise ValueError(f"Grid is missing axes: {', '.join(missing)}")
    if any(len(grid[axis]) == 0 for axis in AXES):
        raise ValueError("Every grid axis needs at least one value")
    return [
        HyperparameterConfig(*values) for values in itertools.product(*(grid[a] for a in AXES))
    ]


def load_run_data(
    config: HyperparameterConfig,
    seed: int,
    dataset_specs: Mapping[str, DatasetSpec],
    test_size: int,
    master_seed: int = 0,
) -> tuple[Dataset, Dataset, DatasetSpec]:
    """Regenerate the exact (train, test) split a run was trained on."""
    try:
        spec = dataset_specs[config.dataset_id]
    except KeyError:
        raise ValueError(f"No dataset spec for dataset_id {config.dataset_id!r}") from None
    data_seed = derive_seed(master_seed, "data", config.dataset_id, config.train_size, seed)
    train_set, test_set = make_dataset(spec, config.train_size, test_size, data_seed)
    return train_set, test_set, spec


def checkpoint_relpath(config: HyperparameterConfig, seed: int) -> str:
    return f"checkpoints/{config.config_id}__seed{seed}.json"


def run_single(
    config: HyperparameterConfig,
    seed: int,
    dataset_specs: Mapping[str, DatasetSpec],
    settings: TrainingSettings,
    master_seed: int = 0,
) -> tuple[ExperimentRecord, Network]:
    """Train one (config, seed) run and return its record (without checkpoint path)."""
    train_set, test_set, spec = load_run_data(
        config, seed, dataset_specs, settings.test_size, master_seed
    )
    net = build_network(
        config,
        derive_seed(master_seed, seed),
        input_dim=spec.input_dim,
        num_classes=spec.num_classes,
    )
    trained, result = train(
        net,
        train_set,
        config.learning_rate,
        momentum=settings.momentum,
        ce_target=settings.ce_target,
        max_epochs=settings.max_epochs,
        batch_size=settings.batch_size,
        seed=derive_seed(master_seed, "sgd", config.config_id, seed),
        min_train_accuracy=settings.min_train_accuracy,
    )
    record = ExperimentRecord(
        config=config,
        seed=seed,
        train_error=result.train_error,
        test_error=evaluate_error(trained, test_set),
        final_cross_entropy=result.final_cross_entropy,
        test_set_size=len(test_set),
        train_set_size=len(train_set),
        status=result.status,
        epochs=result.epochs,
    )
    return record, trained


def _run_job(job) -> tuple[ExperimentRecord, Network]:
    return run_single(*job)


def _isolate_failures(pending):
    """Yield each job's result; a job that raises is logged under its key and skipped."""
    for job, result in pending:
        config, seed = job[0], job[1]
        try:
            yield result()
        except JOB_ERRORS as e:
            logger.error("%s seed %d failed and was not recorded: %s", config.config_id, seed, e)


def run_grid(
    grid: Union[Mapping[str, Sequence[Any]], Iterable[HyperparameterConfig]],
    dataset_specs: Mapping[str, DatasetSpec],
    store: RecordStore,
    *,
    num_seeds: int = 10,
    settings: Optional[TrainingSettings] = None,
    master_seed: int = 0,
    workers: int = 1,
    save_checkpoints: bool = True,
) -> list[ExperimentRecord]:
    """
    Train every (config, seed) pair not already in the store.

    Records are appended as runs finish; failed runs are kept and flagged. A job that
    raises (for example on an unreadable dataset) and write failures are logged per
    record and do not abort the sweep. Returns the newly written records.
    """
    settings = settings or TrainingSettings()
    configs = expand_grid(grid) if isinstance(grid, Mapping) else list(grid)
    if not configs:
        raise ValueError("Grid is empty")
    if num_seeds < 1:
        raise ValueError("num_seeds must be positive")

    done = store.completed_keys()
    jobs = [
        (config, seed, dict(dataset_specs), settings, master_seed)
        for config in configs
        for seed in range(num_seeds)
        if (config.config_id, seed) not in done
    ]
    skipped = len(configs) * num_seeds - len(jobs)
    if skipped:
        logger.info("Skipping %d completed run(s)", skipped)

    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [(job, executor.submit(_run_job, job).result) for job in jobs]
            return _persist(_isolate_failures(futures), store, save_checkpoints)
    serial = ((job, partial(_run_job, job)) for job in jobs)
    return _persist(_isolate_failures(serial), store, save_checkpoints)


def _persist(results, store: RecordStore, save_checkpoints: bool) -> list[ExperimentRecord]:
    written = []
    for record, net in results:
        if save_checkpoints:
            relpath = checkpoint_relpath(record.config, record.seed)
            try:
                save_checkpoint(
                    store.directory / relpath,
                    Checkpoint(net, {"config_id": record.config.config_id, "seed": record.seed}),
                )
                record = replace(record, checkpoint=relpath)
            except OSError as e:
                logger.error("Could not save checkpoint for %s: %s", record.key, e)
        try:
            store.append(record)
        except OSError as e:
            logger.error("Could not append record %s: %s", record.key, e)
            continue
        written.append(record)
        logger.info("%s seed %d: %s", record.config.config_id, record.seed, record.status)
    return written


def filter_records(records: Iterable[ExperimentRecord]) -> list[ExperimentRecord]:
    """Drop runs that missed the cross-entropy or training-accuracy criterion."""
    records = list(records)
    kept = [record for record in records if record.converged]
    removed = len(records) - len(kept)
    if records and not kept:
        logger.warning("All %d record(s) failed the convergence criteria", len(records))
    elif removed:
        logger.info("Filtered out %d failed record(s) of %d", removed, len(records))
    return kept
