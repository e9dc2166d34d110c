"""
Coupled-network environments and weighted sign-errors.

An environment pairs two hyperparameter configs that differ in one axis and takes every
cross-seed pair of their converged runs as samples. Each pair is weighted by how far its
gap difference sits above test-set Monte Carlo noise; environments whose weights leave
too small an effective sample size are discarded.
"""

import itertools
import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .records import AXES, ExperimentRecord, HyperparameterConfig

logger = logging.getLogger(__name__)

ALL_FAMILY = "All"
DEFAULT_N_EFF_MIN = 12.0
STRICT = "strict"
WEAK = "weak"

SamplePair = tuple[ExperimentRecord, ExperimentRecord]


@dataclass(frozen=True, eq=False)
class Environment:
    """Sample pairs of runs whose configs differ only in ``axis``."""

    env_id: str
    axis: str
    value_pair: tuple[Any, Any]
    samples: tuple[SamplePair, ...]
    fixed: tuple[tuple[str, Any], ...] = ()
    config_pair: Optional[tuple[HyperparameterConfig, HyperparameterConfig]] = None

    @property
    def m_test(self) -> int:
        return min(min(a.test_set_size, b.test_set_size) for a, b in self.samples)

    @property
    def weak(self) -> bool:
        return self.config_pair is None


@dataclass(frozen=True)
class SignErrorStat:
    env_id: str
    axis: str
    value_pair: tuple[Any, Any]
    measure: str
    value: Optional[float]
    n_eff: float
    n_pairs_used: int
    n_pairs_dropped: int = 0
    fixed: tuple[tuple[str, Any], ...] = ()

    @property
    def discarded(self) -> bool:
        return self.value is None


@dataclass(frozen=True)
class FamilySummary:
    family: str
    measure: str
    n_environments: int
    n_retained: int
    median: Optional[float] = None
    mean: Optional[float] = None
    p90: Optional[float] = None
    max: Optional[float] = None

    @property
    def no_data(self) -> bool:
        return self.n_retained == 0


def _fixed_label(fixed: Sequence[tuple[str, Any]]) -> str:
    return ",".join(f"{axis}={value}" for axis, value in fixed)


def environment_id(
    axis: str, value_pair: tuple[Any, Any], fixed: Sequence[tuple[str, Any]]
) -> str:
    label = _fixed_label(fixed) if fixed else WEAK
    return f"{axis}:{value_pair[0]}->{value_pair[1]}|{label}"


def _group_by_config(
    records: Iterable[ExperimentRecord],
) -> dict[HyperparameterConfig, list[ExperimentRecord]]:
    by_config: dict[HyperparameterConfig, list[ExperimentRecord]] = defaultdict(list)
    for record in records:
        if record.converged:
            by_config[record.config].append(record)
    for runs in by_config.values():
        runs.sort(key=lambda record: record.seed)
    return by_config


def build_coupled_environments(
    records: Iterable[ExperimentRecord], axes: Sequence[str] = AXES
) -> list[Environment]:
    """
    One environment per axis, per slice of the other axes, per unordered value pair.

    Value pairs are stored ascending. Samples are the full seed cross product of the two
    configs' converged runs. Pairs touching a config with no converged runs are skipped.
    """
    by_config = _group_by_config(records)
    environments: list[Environment] = []
    for axis in axes:
        values = sorted({config.value(axis) for config in by_config})
        if len(values) < 2:
            logger.warning("Axis %s has fewer than two values; no environments", axis)
            continue

        slices: dict[tuple, dict[Any, HyperparameterConfig]] = defaultdict(dict)
        for config in by_config:
            slices[config.complement(axis)][config.value(axis)] = config

        skipped = 0
        for fixed in sorted(slices, key=repr):
            members = slices[fixed]
            for low, high in itertools.combinations(values, 2):
                if low not in members or high not in members:
                    skipped += 1
                    continue
                config_low, config_high = members[low], members[high]
                samples = tuple(
                    itertools.product(by_config[config_low], by_config[config_high])
                )
                environments.append(
                    Environment(
                        env_id=environment_id(axis, (low, high), fixed),
                        axis=axis,
                        value_pair=(low, high),
                        samples=samples,
                        fixed=fixed,
                        config_pair=(config_low, config_high),
                    )
                )
        if skipped:
            logger.warning(
                "Skipped %d %s environment(s) whose configs have no converged runs", skipped, axis
            )
    return environments


def build_weak_environments(
    records: Iterable[ExperimentRecord], axes: Union[str, Sequence[str]] = AXES
) -> list[Environment]:
    """Union of the strict environments sharing an (axis, value pair)."""
    if isinstance(axes, str):
        axes = (axes,)
    merged: dict[tuple[str, tuple[Any, Any]], list[SamplePair]] = {}
    for env in build_coupled_environments(records, axes):
        merged.setdefault((env.axis, env.value_pair), []).extend(env.samples)
    return [
        Environment(
            env_id=environment_id(axis, value_pair, ()),
            axis=axis,
            value_pair=value_pair,
            samples=tuple(samples),
        )
        for (axis, value_pair), samples in merged.items()
    ]


def chi(eps: float, m_test: int) -> float:
    """Hoeffding confidence (1 - 2 exp(-2 m eps^2))^2, with the inner factor clamped at 0."""
    if eps < 0 or m_test < 1:
        raise ValueError("eps must be non-negative and m_test positive")
    inner = 1.0 - 2.0 * math.exp(-2.0 * m_test * eps * eps)
    return max(0.0, inner) ** 2


def kappa(gap_a: float, gap_b: float, m_test: int) -> float:
    """Pair weight in [0, 0.5]; zero unless the gap difference clears the noise level."""
    return max(0.0, chi(abs(gap_b - gap_a) / 2.0, m_test) - 0.5)


def kappa_threshold(m_test: int) -> float:
    """The |gap difference| above which kappa becomes positive."""
    return 2.0 * math.sqrt(math.log(2.0 / (1.0 - 2.0**-0.5)) / (2.0 * m_test))


def effective_sample_size(weights: Iterable[float]) -> float:
    """(sum w)^2 / sum w^2; exactly n for n equal positive weights."""
    weights = np.asarray(list(weights), dtype=np.float64)
    if weights.size == 0 or float(np.max(weights)) == 0.0:
        return 0.0
    # scale so equal weights become exactly 1.0
    weights = weights / np.max(weights)
    return float(np.sum(weights)) ** 2 / float(np.sum(np.square(weights)))


def _sign(x: float) -> float:
    return float(np.sign(x))


def empirical_sign_error(
    env: Environment,
    measure: str,
    n_eff_min: float = DEFAULT_N_EFF_MIN,
    noise_filter: bool = True,
) -> SignErrorStat:
    """
    Weighted fraction of pairs where the measure's change disagrees in sign with the gap's.

    A pair's loss is 1 - sign(dG) sign(dC), so a tie on either side costs half. Without
    ``noise_filter`` every pair has unit weight.
    """
    weights, losses = [], []
    dropped = 0
    for first, second in env.samples:
        c_first, c_second = first.measure(measure), second.measure(measure)
        if c_first is None or c_second is None:
            dropped += 1
            continue
        if noise_filter:
            m_test = min(first.test_set_size, second.test_set_size)
            weights.append(kappa(first.gap, second.gap, m_test))
        else:
            weights.append(1.0)
        losses.append(1.0 - _sign(second.gap - first.gap) * _sign(c_second - c_first))

    n_eff = effective_sample_size(weights)
    value = None
    if n_eff >= n_eff_min and n_eff > 0:
        w = np.asarray(weights)
        value = 0.5 * float(np.sum(w * np.asarray(losses))) / float(np.sum(w))
    return SignErrorStat(
        env_id=env.env_id,
        axis=env.axis,
        value_pair=env.value_pair,
        measure=measure,
        value=value,
        n_eff=n_eff,
        n_pairs_used=len(weights),
        n_pairs_dropped=dropped,
        fixed=env.fixed,
    )


def evaluate_environments(
    environments: Iterable[Environment],
    measures: Sequence[str],
    n_eff_min: float = DEFAULT_N_EFF_MIN,
    noise_filter: bool = True,
) -> list[SignErrorStat]:
    """Sign-error of every measure in every environment, in environment order."""
    stats = []
    for env in environments:
        for measure in measures:
            stats.append(empirical_sign_error(env, measure, n_eff_min, noise_filter))
    discarded = {stat.env_id for stat in stats if stat.discarded}
    if discarded:
        logger.info("%d environment(s) discarded for at least one measure", len(discarded))
    return stats


def _retained(stats: Iterable[SignErrorStat], measure: str) -> list[float]:
    return [stat.value for stat in stats if stat.measure == measure and not stat.discarded]


def robust_sign_error(stats: Iterable[SignErrorStat], measure: str) -> Optional[float]:
    """Worst retained sign-error, or None when no environment was retained."""
    values = _retained(stats, measure)
    return max(values) if values else None


def average_sign_error(stats: Iterable[SignErrorStat], measure: str) -> Optional[float]:
    values = _retained(stats, measure)
    return float(np.mean(values)) if values else None


def summarize_family(
    stats: Iterable[SignErrorStat], measure: str, family: str = ALL_FAMILY
) -> FamilySummary:
    stats = [stat for stat in stats if stat.measure == measure]
    values = np.array(_retained(stats, measure))
    if values.size == 0:
        return FamilySummary(family, measure, len(stats), 0)
    return FamilySummary(
        family=family,
        measure=measure,
        n_environments=len(stats),
        n_retained=int(values.size),
        median=float(np.median(values)),
        mean=float(np.mean(values)),
        p90=float(np.percentile(values, 90, method="higher")),
        max=float(np.max(values)),
    )


def family_summaries(
    stats: Sequence[SignErrorStat], measures: Sequence[str], axes: Sequence[str] = AXES
) -> list[FamilySummary]:
    """The All family plus one family per axis, for every measure."""
    summaries = []
    for measure in measures:
        summaries.append(summarize_family(stats, measure, ALL_FAMILY))
        for axis in axes:
            axis_stats = [stat for stat in stats if stat.axis == axis]
            summaries.append(summarize_family(axis_stats, measure, axis))
    return summaries


def pairwise_value_breakdown(
    stats: Sequence[SignErrorStat], measure: str, axis: str
) -> dict[tuple[Any, Any], FamilySummary]:
    """One summary per value pair of ``axis``; cells without environments have no data."""
    axis_stats = [stat for stat in stats if stat.axis == axis and stat.measure == measure]
    values = sorted({v for stat in axis_stats for v in stat.value_pair})
    cells = {}
    for pair in itertools.combinations(values, 2):
        cell_stats = [stat for stat in axis_stats if stat.value_pair == pair]
        cells[pair] = summarize_family(cell_stats, measure, f"{axis}:{pair[0]}->{pair[1]}")
    return cells


def neff_threshold_counts(
    stats: Iterable[SignErrorStat], thresholds: Sequence[float]
) -> dict[str, dict[float, int]]:
    """Environments per axis (and overall) whose effective sample size reaches each threshold."""
    best: dict[str, tuple[str, float]] = {}
    for stat in stats:
        n_eff = max(stat.n_eff, best.get(stat.env_id, (stat.axis, 0.0))[1])
        best[stat.env_id] = (stat.axis, n_eff)

    axes = sorted({axis for axis, _ in best.values()})
    counts: dict[str, dict[float, int]] = {}
    for family in [ALL_FAMILY] + axes:
        members = [n for axis, n in best.values() if family == ALL_FAMILY or axis == family]
        counts[family] = {t: sum(1 for n in members if n >= t) for t in thresholds}
    return counts


def failing_environments(
    stats: Iterable[SignErrorStat], measure: str, threshold: float
) -> list[SignErrorStat]:
    """Retained environments where ``measure`` has sign-error above ``threshold``, worst first."""
    failing = [
        stat
        for stat in stats
        if stat.measure == measure and not stat.discarded and stat.value > threshold
    ]
    return sorted(failing, key=lambda stat: (-stat.value, stat.env_id))


def measure_order(summaries: Iterable[FamilySummary], key: str = "mean") -> list[str]:
    """Measures sorted by their All-family ``key`` statistic; no-data measures go last."""
    rows: Mapping[str, FamilySummary] = {
        summary.measure: summary for summary in summaries if summary.family == ALL_FAMILY
    }

    def sort_key(measure: str):
        value = getattr(rows[measure], key)
        return (value is None, value if value is not None else 0.0, measure)

    return sorted(rows, key=sort_key)
