"""Robust (worst-environment) regression of the generalization gap on a measure."""

import logging
import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np
from scipy.optimize import minimize_scalar

from .records import AXES, ExperimentRecord

logger = logging.getLogger(__name__)

PER_CONFIG = "per_config"
SINGLE_AXIS_VARIES = "single_axis_varies"
ALL_BUT_ONE_FIXED = "all_but_one_fixed"
REGRESSION_FAMILIES = (PER_CONFIG, SINGLE_AXIS_VARIES, ALL_BUT_ONE_FIXED)

BASELINE = "baseline"
ALL_AXES = "all"

SCALAR_TOL = 1e-12
MAX_DOUBLINGS = 64


@dataclass(frozen=True)
class AffineParams:
    a: float
    b: float

    def __post_init__(self):
        if self.a < 0:
            raise ValueError("the slope a must be non-negative")


@dataclass(frozen=True, eq=False)
class RegressionEnvironment:
    env_id: str
    records: tuple[ExperimentRecord, ...]
    axis: Optional[str] = None


@dataclass(frozen=True, eq=False)
class RegressionFamily:
    kind: str
    environments: tuple[RegressionEnvironment, ...]

    def for_axis(self, axis: str) -> "RegressionFamily":
        return RegressionFamily(
            self.kind, tuple(env for env in self.environments if env.axis == axis)
        )

    @property
    def axes(self) -> list[str]:
        return [axis for axis in AXES if any(env.axis == axis for env in self.environments)]


@dataclass(frozen=True)
class FitResult:
    params: AffineParams
    robust_mse: float
    n_envs: int
    n_dropped: int = 0
    degenerate: bool = False

    @property
    def robust_rmse(self) -> float:
        return math.sqrt(self.robust_mse)


@dataclass(frozen=True)
class RegressionRow:
    measure: str
    a: float
    b: float
    robust_rmse: float
    mean_rmse: float
    baseline_robust_rmse: float
    linear_robust_rmse: Optional[float]
    family_kind: str
    n_envs: int
    axis: str = ALL_AXES
    degenerate: bool = False


def build_regression_environments(
    records: Iterable[ExperimentRecord], kind: str, axes: Sequence[str] = AXES
) -> RegressionFamily:
    """
    Group converged records into regression environments.

    per_config: one environment per config (seeds vary). single_axis_varies: one per axis
    and per slice of the other axes. all_but_one_fixed: one per axis and per value of it.
    Axes with fewer than two values are skipped for the last two kinds.
    """
    if kind not in REGRESSION_FAMILIES:
        raise ValueError(f"Unknown regression family: {kind}")
    records = [record for record in records if record.converged]

    groups: dict[tuple[Optional[str], str], list[ExperimentRecord]] = defaultdict(list)
    if kind == PER_CONFIG:
        for record in records:
            groups[(None, record.config.config_id)].append(record)
    else:
        for axis in axes:
            if len({record.config.value(axis) for record in records}) < 2:
                logger.info("Axis %s has a single value; no %s environments", axis, kind)
                continue
            for record in records:
                if kind == SINGLE_AXIS_VARIES:
                    fixed = ",".join(f"{a}={v}" for a, v in record.config.complement(axis))
                    groups[(axis, f"{axis}|{fixed}")].append(record)
                else:
                    groups[(axis, f"{axis}={record.config.value(axis)}")].append(record)

    environments = []
    for (axis, env_id), members in sorted(groups.items(), key=lambda item: item[0][1]):
        if not members:
            logger.warning("Dropping empty regression environment %s", env_id)
            continue
        members.sort(key=lambda record: (record.config, record.seed))
        environments.append(RegressionEnvironment(env_id, tuple(members), axis))
    logger.info("%s family: %d environment(s)", kind, len(environments))
    return RegressionFamily(kind, tuple(environments))


def env_mse(records: Sequence[ExperimentRecord], measure: str, params: AffineParams) -> float:
    """Mean of (a*C + b - G)^2 over the records."""
    if not records:
        raise ValueError("an environment needs at least one record")
    values = np.array([record.measure(measure) for record in records], dtype=np.float64)
    gaps = np.array([record.gap for record in records])
    return float(np.mean(np.square(params.a * values + params.b - gaps)))


def _environment_arrays(
    family: RegressionFamily, measure: Optional[str]
) -> tuple[list[tuple[np.ndarray, np.ndarray]], int]:
    """(C, G) per environment; environments with an undefined measure value are dropped."""
    arrays = []
    dropped = 0
    for env in family.environments:
        gaps = np.array([record.gap for record in env.records])
        if measure is None:
            arrays.append((np.zeros_like(gaps), gaps))
            continue
        values = [record.measure(measure) for record in env.records]
        if any(value is None for value in values):
            dropped += 1
            continue
        arrays.append((np.array(values, dtype=np.float64), gaps))
    if dropped:
        logger.info("%s: dropped %d environment(s) with undefined values", measure, dropped)
    return arrays, dropped


def _best_bias(arrays, a: float) -> tuple[float, float]:
    """
    min over b of max_e mean((a*C + b - G)^2).

    Each environment contributes (b + mu_e)^2 + var_e with mu_e, var_e the mean and
    variance of a*C - G, so the optimum lies between the extreme vertices -mu_e.
    """
    residuals = [a * values - gaps for values, gaps in arrays]
    mus = np.array([np.mean(r) for r in residuals])
    variances = np.array([np.mean(np.square(r - np.mean(r))) for r in residuals])

    def objective(b: float) -> float:
        return float(np.max(np.square(b + mus) + variances))

    lo, hi = float(-np.max(mus)), float(-np.min(mus))
    candidates = [lo, hi]
    if hi > lo:
        result = minimize_scalar(
            objective, bounds=(lo, hi), method="bounded", options={"xatol": SCALAR_TOL}
        )
        candidates.append(float(result.x))
    best = min(candidates, key=objective)
    return best, objective(best)


def _minimize_slope(objective: Callable[[float], float], scale: float) -> float:
    """Minimize a convex function over a >= 0, bracketing by doubling from ``scale``."""
    upper = scale
    for _ in range(MAX_DOUBLINGS):
        if objective(2.0 * upper) >= objective(upper):
            break
        upper *= 2.0
    result = minimize_scalar(
        objective,
        bounds=(0.0, 2.0 * upper),
        method="bounded",
        options={"xatol": SCALAR_TOL * max(1.0, upper)},
    )
    return min((0.0, float(result.x)), key=objective)


def _slope_scale(arrays) -> float:
    values = np.concatenate([values for values, _ in arrays])
    gaps = np.concatenate([gaps for _, gaps in arrays])
    c_std, g_std = float(np.std(values)), float(np.std(gaps))
    if c_std > 0 and g_std > 0:
        return g_std / c_std
    return 1.0


def fit_affine(family: RegressionFamily, measure: str) -> FitResult:
    """
    min over a >= 0 and b of the worst-environment MSE of a*C + b against the gap.

    The objective is a maximum of convex quadratics; it is minimized exactly in b for each
    a and then over a. If C is constant within every environment, a is not identifiable and
    the bias-only fit is returned with ``degenerate`` set.
    """
    arrays, dropped = _environment_arrays(family, measure)
    if not arrays:
        raise ValueError(f"no regression environment has defined values for {measure}")

    if all(np.ptp(values) == 0 for values, _ in arrays):
        b, mse = _best_bias(arrays, 0.0)
        return FitResult(AffineParams(0.0, b), mse, len(arrays), dropped, degenerate=True)

    a = _minimize_slope(lambda a: _best_bias(arrays, a)[1], _slope_scale(arrays))
    b, mse = _best_bias(arrays, a)
    return FitResult(AffineParams(a, b), mse, len(arrays), dropped)


def fit_linear(family: RegressionFamily, measure: str) -> FitResult:
    """Like fit_affine with the bias fixed at zero."""
    arrays, dropped = _environment_arrays(family, measure)
    if not arrays:
        raise ValueError(f"no regression environment has defined values for {measure}")

    def objective(a: float) -> float:
        return max(float(np.mean(np.square(a * values - gaps))) for values, gaps in arrays)

    a = _minimize_slope(objective, _slope_scale(arrays))
    return FitResult(AffineParams(a, 0.0), objective(a), len(arrays), dropped)


def fit_bias_baseline(family: RegressionFamily) -> tuple[float, float]:
    """(b*, robust RMSE) of the best constant predictor of the gap."""
    arrays, _ = _environment_arrays(family, None)
    if not arrays:
        raise ValueError("the regression family has no environments")
    b, mse = _best_bias(arrays, 0.0)
    return b, math.sqrt(mse)


def _mean_rmse(arrays, params: AffineParams) -> float:
    return float(
        np.mean(
            [
                math.sqrt(float(np.mean(np.square(params.a * values + params.b - gaps))))
                for values, gaps in arrays
            ]
        )
    )


def _report_rows(
    family: RegressionFamily, measures: Sequence[str], axis: str
) -> list[RegressionRow]:
    baseline_b, baseline_rmse = fit_bias_baseline(family)
    baseline_arrays, _ = _environment_arrays(family, None)
    rows = []
    for measure in measures:
        arrays, _ = _environment_arrays(family, measure)
        if not arrays:
            logger.warning("Skipping %s: undefined in every environment", measure)
            continue
        fit = fit_affine(family, measure)
        linear = fit_linear(family, measure)
        rows.append(
            RegressionRow(
                measure=measure,
                a=fit.params.a,
                b=fit.params.b,
                robust_rmse=fit.robust_rmse,
                mean_rmse=_mean_rmse(arrays, fit.params),
                baseline_robust_rmse=baseline_rmse,
                linear_robust_rmse=linear.robust_rmse,
                family_kind=family.kind,
                n_envs=fit.n_envs,
                axis=axis,
                degenerate=fit.degenerate,
            )
        )
    rows.append(
        RegressionRow(
            measure=BASELINE,
            a=0.0,
            b=baseline_b,
            robust_rmse=baseline_rmse,
            mean_rmse=_mean_rmse(baseline_arrays, AffineParams(0.0, baseline_b)),
            baseline_robust_rmse=baseline_rmse,
            linear_robust_rmse=None,
            family_kind=family.kind,
            n_envs=len(baseline_arrays),
            axis=axis,
        )
    )
    return rows


def regression_report(
    family: RegressionFamily, measures: Sequence[str], per_axis: bool = False
) -> list[RegressionRow]:
    """
    One row per measure with a defined value somewhere, plus the bias-only baseline row.

    With ``per_axis`` the rows are repeated for the environments of each axis.
    """
    rows = _report_rows(family, measures, ALL_AXES)
    if per_axis and family.kind != PER_CONFIG:
        for axis in family.axes:
            rows.extend(_report_rows(family.for_axis(axis), measures, axis))
    return rows
