"""
Generalization measures computed from a trained network, its initialization and its
training set.

Every measure has the form sqrt(C / m) (or its log). Values that cannot be formed
(a non-positive margin, a zero norm inside a log, a missing flatness scale) are ``None``;
no measure is ever NaN or infinite.
"""

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Union

import numpy as np
from scipy.special import logsumexp

from .nn_core import (
    ISOTROPIC,
    MAGNITUDE_AWARE,
    CheckpointError,
    ConvergenceError,
    Network,
    count_params,
    flat_init_params,
    flat_params,
    forward,
    forward_squared_ones,
    frobenius_norm_sq,
    load_checkpoint,
    perturb_with_noise,
    spectral_norm,
)
from .records import ExperimentRecord, derive_seed
from .trainer import Dataset, DatasetSpec, load_run_data

logger = logging.getLogger(__name__)

VC_IDS = ("params",)
OUTPUT_IDS = ("inverse.margin",)
SPECTRAL_IDS = (
    "log.spec.init.main",
    "log.spec.orig.main",
    "log.prod.of.spec.over.margin",
    "log.prod.of.spec",
    "fro.over.spec",
    "log.sum.of.spec.over.margin",
    "log.sum.of.spec",
)
FROBENIUS_IDS = (
    "log.prod.of.fro.over.margin",
    "log.prod.of.fro",
    "log.sum.of.fro.over.margin",
    "log.sum.of.fro",
    "fro.dist",
    "dist.spec.init",
    "param.norm",
)
PATH_IDS = ("path.norm.over.margin", "path.norm")
PACBAYES_IDS = (
    "pacbayes.init",
    "pacbayes.orig",
    "pacbayes.flatness",
    "pacbayes.mag.init",
    "pacbayes.mag.orig",
    "pacbayes.mag.flatness",
)
MEASURE_IDS = VC_IDS + OUTPUT_IDS + SPECTRAL_IDS + FROBENIUS_IDS + PATH_IDS + PACBAYES_IDS

ERROR_LOSS = "error"
CROSS_ENTROPY_LOSS = "cross_entropy"
LOG_TERM_SIGMA = "sigma"
LOG_TERM_DELTA = "delta"

PACBAYES_CONSTANT = 10.0


class SearchInfeasibleError(ValueError):
    """Raised when the unperturbed loss already reaches the flatness target."""


@dataclass(frozen=True)
class MeasureSettings:
    margin_percentile: float = 10.0
    delta: float = 0.1
    epsilon: float = 1e-3
    sigma_target: float = 0.1
    mc_samples: int = 8
    sigma_min: float = 1e-6
    sigma_max: float = 16.0
    sigma_tol: float = 0.01
    flatness_loss: str = ERROR_LOSS
    pacbayes_init_log_term: str = LOG_TERM_SIGMA

    def __post_init__(self):
        if not 0 <= self.margin_percentile <= 100:
            raise ValueError("margin_percentile must lie in [0, 100]")
        if self.delta <= 0 or self.epsilon < 0:
            raise ValueError("delta must be positive and epsilon non-negative")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")
        if not 0 < self.sigma_min < self.sigma_max or self.sigma_tol <= 0:
            raise ValueError("need 0 < sigma_min < sigma_max and sigma_tol > 0")
        if self.flatness_loss not in (ERROR_LOSS, CROSS_ENTROPY_LOSS):
            raise ValueError(f"Unsupported flatness loss: {self.flatness_loss}")
        if self.pacbayes_init_log_term not in (LOG_TERM_SIGMA, LOG_TERM_DELTA):
            raise ValueError("pacbayes_init_log_term must be 'sigma' or 'delta'")


@dataclass(frozen=True)
class LayerNorms:
    spectral: np.ndarray
    frobenius_sq: np.ndarray
    dist_frobenius_sq: np.ndarray
    dist_spectral: np.ndarray


@dataclass(frozen=True, eq=False)
class MeasureContext:
    """Everything the measures need about one trained network."""

    net: Network
    train_set: Dataset
    gamma: float
    sigma: Optional[float] = None
    sigma_mag: Optional[float] = None
    delta: float = 0.1
    epsilon: float = 1e-3
    pacbayes_init_log_term: str = LOG_TERM_SIGMA
    m: int = field(init=False)
    num_params: int = field(init=False)

    def __post_init__(self):
        if len(self.train_set) == 0:
            raise ValueError("the training set must be non-empty")
        object.__setattr__(self, "m", len(self.train_set))
        object.__setattr__(self, "num_params", count_params(self.net))

    @property
    def depth(self) -> int:
        return self.net.depth

    @property
    def margin_defined(self) -> bool:
        return self.gamma > 0

    @cached_property
    def layer_norms(self) -> LayerNorms:
        spectral, fro_sq, dist_fro_sq, dist_spec = [], [], [], []
        for layer, init in zip(self.net.layers, self.net.init_layers):
            diff = layer.weight - init.weight
            spectral.append(_spectral_or_estimate(layer.spec, layer.weight))
            dist_spec.append(_spectral_or_estimate(layer.spec, diff))
            fro_sq.append(frobenius_norm_sq(layer.weight))
            dist_fro_sq.append(frobenius_norm_sq(diff))
        return LayerNorms(
            np.array(spectral), np.array(fro_sq), np.array(dist_fro_sq), np.array(dist_spec)
        )


def _spectral_or_estimate(spec, weight) -> float:
    try:
        return spectral_norm(spec, weight)
    except ConvergenceError as e:
        logger.warning(
            "Spectral norm did not converge in %d iterations; using estimate %g",
            e.iterations,
            e.estimate,
        )
        return e.estimate


def _finite_or_none(value: float) -> Optional[float]:
    value = float(value)
    return value if math.isfinite(value) else None


def _sqrt_or_none(radicand: float) -> Optional[float]:
    if not math.isfinite(radicand) or radicand < 0:
        return None
    return math.sqrt(radicand)


def margins(net: Network, dataset: Dataset) -> np.ndarray:
    """Per-example logit of the true class minus the largest other logit."""
    logits = forward(net, dataset.x)
    rows = np.arange(len(dataset))
    true_logits = logits[rows, dataset.y]
    others = logits.copy()
    others[rows, dataset.y] = -np.inf
    return true_logits - np.max(others, axis=1)


def margin_percentile(net: Network, train_set: Dataset, p: float = 10.0) -> float:
    """The p-th percentile (nearest rank below) of the training margins; may be <= 0."""
    if len(train_set) == 0:
        raise ValueError("the training set must be non-empty")
    return float(np.percentile(margins(net, train_set), p, method="lower"))


def compute_vc_output(ctx: MeasureContext) -> dict[str, Optional[float]]:
    inverse_margin = None
    if ctx.margin_defined:
        inverse_margin = _finite_or_none(1.0 / math.sqrt(ctx.gamma**2 * ctx.m))
    return {
        "params": math.sqrt(ctx.num_params / ctx.m),
        "inverse.margin": inverse_margin,
    }


def compute_spectral(ctx: MeasureContext) -> dict[str, Optional[float]]:
    """
    Spectral-norm measures, evaluated in log space.

    log sqrt(prod ||W_i||_2^2 / m) is written as sum(log ||W_i||_2) - log(m)/2 so deep
    products neither overflow nor underflow.
    """
    out: dict[str, Optional[float]] = dict.fromkeys(SPECTRAL_IDS)
    norms = ctx.layer_norms
    if np.any(norms.spectral <= 0):
        logger.debug("Zero spectral norm; spectral measures undefined")
        return out

    d = ctx.depth
    log_m = math.log(ctx.m)
    log_prod_sq = 2.0 * float(np.sum(np.log(norms.spectral)))
    spec_sq = np.square(norms.spectral)
    orig_ratio = float(np.sum(norms.frobenius_sq / spec_sq))
    init_ratio = float(np.sum(norms.dist_frobenius_sq / spec_sq))

    out["log.prod.of.spec"] = 0.5 * (log_prod_sq - log_m)
    out["log.sum.of.spec"] = 0.5 * (math.log(d) + log_prod_sq / d - log_m)
    out["fro.over.spec"] = math.sqrt(orig_ratio / ctx.m)

    if ctx.margin_defined:
        log_gamma_sq = 2.0 * math.log(ctx.gamma)
        out["log.prod.of.spec.over.margin"] = 0.5 * (log_prod_sq - log_gamma_sq - log_m)
        out["log.sum.of.spec.over.margin"] = 0.5 * (
            math.log(d) + (log_prod_sq - log_gamma_sq) / d - log_m
        )
        if orig_ratio > 0:
            out["log.spec.orig.main"] = 0.5 * (
                log_prod_sq + math.log(orig_ratio) - log_gamma_sq - log_m
            )
        if init_ratio > 0:
            out["log.spec.init.main"] = 0.5 * (
                log_prod_sq + math.log(init_ratio) - log_gamma_sq - log_m
            )
    return {key: None if value is None else _finite_or_none(value) for key, value in out.items()}


def compute_frobenius(ctx: MeasureContext) -> dict[str, Optional[float]]:
    out: dict[str, Optional[float]] = dict.fromkeys(FROBENIUS_IDS)
    norms = ctx.layer_norms
    m = ctx.m
    d = ctx.depth

    out["fro.dist"] = math.sqrt(float(np.sum(norms.dist_frobenius_sq)) / m)
    out["dist.spec.init"] = math.sqrt(float(np.sum(np.square(norms.dist_spectral))) / m)
    out["param.norm"] = math.sqrt(float(np.sum(norms.frobenius_sq)) / m)

    if np.all(norms.frobenius_sq > 0):
        log_m = math.log(m)
        log_prod_sq = float(np.sum(np.log(norms.frobenius_sq)))
        out["log.prod.of.fro"] = 0.5 * (log_prod_sq - log_m)
        out["log.sum.of.fro"] = 0.5 * (math.log(d) + log_prod_sq / d - log_m)
        if ctx.margin_defined:
            log_gamma_sq = 2.0 * math.log(ctx.gamma)
            out["log.prod.of.fro.over.margin"] = 0.5 * (log_prod_sq - log_gamma_sq - log_m)
            out["log.sum.of.fro.over.margin"] = 0.5 * (
                math.log(d) + (log_prod_sq - log_gamma_sq) / d - log_m
            )
    return {key: None if value is None else _finite_or_none(value) for key, value in out.items()}


def compute_path(ctx: MeasureContext) -> dict[str, Optional[float]]:
    total = float(np.sum(forward_squared_ones(ctx.net)))
    path_norm = _sqrt_or_none(total / ctx.m)
    over_margin = None
    if ctx.margin_defined:
        over_margin = _sqrt_or_none(total / (ctx.gamma**2 * ctx.m))
    return {"path.norm.over.margin": over_margin, "path.norm": path_norm}


def compute_pacbayes(ctx: MeasureContext) -> dict[str, Optional[float]]:
    out: dict[str, Optional[float]] = dict.fromkeys(PACBAYES_IDS)
    m = ctx.m
    w = flat_params(ctx.net)
    diff = w - flat_init_params(ctx.net)
    log_m_delta = math.log(m / ctx.delta)

    sigma = ctx.sigma
    if sigma is not None and sigma > 0:
        init_log = log_m_delta
        if ctx.pacbayes_init_log_term == LOG_TERM_SIGMA:
            init_log = math.log(m / sigma)
        out["pacbayes.flatness"] = _sqrt_or_none(1.0 / (sigma**2 * m))
        out["pacbayes.init"] = _sqrt_or_none(
            (float(np.dot(diff, diff)) / (4 * sigma**2) + init_log + PACBAYES_CONSTANT) / m
        )
        out["pacbayes.orig"] = _sqrt_or_none(
            (float(np.dot(w, w)) / (4 * sigma**2) + log_m_delta + PACBAYES_CONSTANT) / m
        )

    sigma_mag = ctx.sigma_mag
    if sigma_mag is not None and sigma_mag > 0:
        omega = ctx.num_params
        eps_sq = ctx.epsilon**2
        denominators = eps_sq + sigma_mag**2 * np.square(diff)
        out["pacbayes.mag.flatness"] = _sqrt_or_none(1.0 / (sigma_mag**2 * m))
        with np.errstate(divide="ignore", invalid="ignore"):
            for measure_id, reference in (
                ("pacbayes.mag.init", diff),
                ("pacbayes.mag.orig", w),
            ):
                mean_sq = float(np.dot(reference, reference)) / omega
                numerator = eps_sq + (sigma_mag**2 + 1) * mean_sq
                log_ratio = float(np.sum(np.log(numerator / denominators)))
                out[measure_id] = _sqrt_or_none(
                    (0.25 * log_ratio + log_m_delta + PACBAYES_CONSTANT) / m
                )
    return out


def compute_all(ctx: MeasureContext) -> dict[str, Optional[float]]:
    """All measures, keyed and ordered by MEASURE_IDS."""
    values: dict[str, Optional[float]] = {}
    for compute in (
        compute_vc_output,
        compute_spectral,
        compute_frobenius,
        compute_path,
        compute_pacbayes,
    ):
        values.update(compute(ctx))
    return {measure_id: values.get(measure_id) for measure_id in MEASURE_IDS}


@dataclass(frozen=True)
class SigmaSearchResult:
    sigma: float
    hit_max: bool
    evaluations: tuple[tuple[float, float], ...]


def search_sigma(
    loss_fn: Callable[[float], float],
    target: float = 0.1,
    sigma_min: float = 1e-6,
    sigma_max: float = 16.0,
    tol: float = 0.01,
) -> SigmaSearchResult:
    """
    Largest sigma with loss_fn(sigma) <= target, by doubling from ``sigma_min`` and then
    bisecting (geometrically) until the bracket is within a factor ``1 + tol``.

    If no sigma up to ``sigma_max`` exceeds the target, ``sigma_max`` is returned with
    ``hit_max`` set.
    """
    if not 0 < sigma_min < sigma_max:
        raise ValueError("need 0 < sigma_min < sigma_max")
    evaluations: list[tuple[float, float]] = []

    def evaluate(sigma: float) -> float:
        value = float(loss_fn(sigma))
        evaluations.append((sigma, value))
        return value

    if evaluate(sigma_min) > target:
        raise SearchInfeasibleError(f"loss already exceeds {target} at sigma={sigma_min}")

    lo = sigma_min
    while True:
        candidate = min(2.0 * lo, sigma_max)
        if evaluate(candidate) > target:
            hi = candidate
            break
        if candidate >= sigma_max:
            logger.info("No sigma up to %g exceeds the target; returning the bound", sigma_max)
            return SigmaSearchResult(sigma_max, True, tuple(evaluations))
        lo = candidate

    while hi > lo * (1.0 + tol):
        mid = math.sqrt(lo * hi)
        if evaluate(mid) <= target:
            lo = mid
        else:
            hi = mid
    return SigmaSearchResult(lo, False, tuple(evaluations))


def _loss(net: Network, dataset: Dataset, loss: str) -> float:
    logits = forward(net, dataset.x)
    if loss == CROSS_ENTROPY_LOSS:
        rows = np.arange(len(dataset))
        return float(np.mean(logsumexp(logits, axis=1) - logits[rows, dataset.y]))
    return float(np.mean(np.argmax(logits, axis=1) != dataset.y))


def perturbed_loss_fn(
    net: Network,
    train_set: Dataset,
    mode: str = ISOTROPIC,
    *,
    mc_samples: int = 8,
    seed: int = 0,
    epsilon: float = 1e-3,
    loss: str = ERROR_LOSS,
) -> Callable[[float], float]:
    """
    Monte Carlo estimate of the expected loss under weight perturbation of scale sigma.

    The standard-normal draws are fixed once, so every sigma reuses the same noise.
    """
    noises = np.random.default_rng(seed).standard_normal((mc_samples, count_params(net)))

    def expected_loss(sigma: float) -> float:
        with np.errstate(over="ignore", invalid="ignore"):
            values = [
                _loss(perturb_with_noise(net, sigma, noise, mode, epsilon), train_set, loss)
                for noise in noises
            ]
        value = float(np.mean(values))
        # a non-finite loss means the perturbation blew the logits up
        return value if math.isfinite(value) else math.inf

    return expected_loss


def sigma_search(
    net: Network,
    train_set: Dataset,
    mode: str = ISOTROPIC,
    target: float = 0.1,
    mc_samples: int = 8,
    tol: float = 0.01,
    seed: int = 0,
    *,
    epsilon: float = 1e-3,
    sigma_min: float = 1e-6,
    sigma_max: float = 16.0,
    loss: str = ERROR_LOSS,
) -> SigmaSearchResult:
    """Flatness scale sigma (isotropic) or sigma' (magnitude-aware) of a trained network."""
    base = _loss(net, train_set, loss)
    if base >= target:
        raise SearchInfeasibleError(
            f"unperturbed {loss} {base:.4g} is not below the target {target}"
        )
    loss_fn = perturbed_loss_fn(
        net, train_set, mode, mc_samples=mc_samples, seed=seed, epsilon=epsilon, loss=loss
    )
    return search_sigma(loss_fn, target, sigma_min, sigma_max, tol)


def build_context(
    net: Network,
    train_set: Dataset,
    settings: Optional[MeasureSettings] = None,
    seed: int = 0,
    *,
    with_flatness: bool = True,
) -> MeasureContext:
    """Compute the margin and both flatness scales of ``net`` and bundle them."""
    settings = settings or MeasureSettings()
    gamma = margin_percentile(net, train_set, settings.margin_percentile)
    scales: dict[str, Optional[float]] = {ISOTROPIC: None, MAGNITUDE_AWARE: None}
    if with_flatness:
        for mode, measure_id in (
            (ISOTROPIC, "pacbayes.flatness"),
            (MAGNITUDE_AWARE, "pacbayes.mag.flatness"),
        ):
            try:
                result = sigma_search(
                    net,
                    train_set,
                    mode,
                    target=settings.sigma_target,
                    mc_samples=settings.mc_samples,
                    tol=settings.sigma_tol,
                    seed=derive_seed(seed, measure_id),
                    epsilon=settings.epsilon,
                    sigma_min=settings.sigma_min,
                    sigma_max=settings.sigma_max,
                    loss=settings.flatness_loss,
                )
            except SearchInfeasibleError as e:
                logger.warning("Flatness search (%s) infeasible: %s", mode, e)
                continue
            if result.hit_max:
                logger.warning("Flatness search (%s) reached sigma_max=%g", mode, result.sigma)
            scales[mode] = result.sigma
    return MeasureContext(
        net=net,
        train_set=train_set,
        gamma=gamma,
        sigma=scales[ISOTROPIC],
        sigma_mag=scales[MAGNITUDE_AWARE],
        delta=settings.delta,
        epsilon=settings.epsilon,
        pacbayes_init_log_term=settings.pacbayes_init_log_term,
    )


def is_measured(record: ExperimentRecord) -> bool:
    return all(measure_id in record.measures for measure_id in MEASURE_IDS)


def measure_record(
    record: ExperimentRecord,
    store_dir: Union[str, Path],
    dataset_specs: Mapping[str, DatasetSpec],
    settings: Optional[MeasureSettings] = None,
    *,
    test_size: int,
    master_seed: int = 0,
) -> dict[str, Optional[float]]:
    """
    Load a record's checkpoint, regenerate its training split and compute every measure.

    Raises:
        CheckpointError: If the record has no checkpoint or it cannot be read.
    """
    if not record.checkpoint:
        raise CheckpointError(f"record {record.key} has no checkpoint")
    path = Path(store_dir) / record.checkpoint
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    net = load_checkpoint(path).network
    train_set, _, _ = load_run_data(
        record.config, record.seed, dataset_specs, test_size, master_seed
    )
    ctx = build_context(
        net,
        train_set,
        settings,
        seed=derive_seed(master_seed, record.config.config_id, record.seed),
    )
    return compute_all(ctx)


def measure_records(
    records: Iterable[ExperimentRecord],
    store_dir: Union[str, Path],
    dataset_specs: Mapping[str, DatasetSpec],
    settings: Optional[MeasureSettings] = None,
    *,
    test_size: int,
    master_seed: int = 0,
    recompute: bool = False,
) -> tuple[list[ExperimentRecord], list[tuple[tuple[str, int], str]]]:
    """
    Attach measure vectors to converged records.

    Records that already carry every measure are left alone unless ``recompute`` is set.
    Records whose checkpoint is missing or unreadable are kept unchanged and returned in
    the skip list as (key, reason).
    """
    updated = []
    skipped = []
    for record in records:
        if not record.converged or (is_measured(record) and not recompute):
            updated.append(record)
            continue
        try:
            values = measure_record(
                record,
                store_dir,
                dataset_specs,
                settings,
                test_size=test_size,
                master_seed=master_seed,
            )
        except CheckpointError as e:
            logger.warning("Skipping %s seed %d: %s", *record.key, e)
            skipped.append((record.key, str(e)))
            updated.append(record)
            continue
        logger.info("Measured %s seed %d", *record.key)
        updated.append(record.with_measures(values))
    return updated, skipped
