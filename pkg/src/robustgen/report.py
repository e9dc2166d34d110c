"""
CSV interchange tables, SVG figures and the markdown summary.

Every table carries a ``manifest_hash`` column and every figure a ``<metadata>`` element
so that outputs can be traced to the manifest that produced them. Rendering is pure
string assembly with fixed number formatting, so identical inputs give identical bytes.
"""

import logging
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

import pandas as pd

from .robust_eval import (
    ALL_FAMILY,
    STRICT,
    WEAK,
    FamilySummary,
    SignErrorStat,
    measure_order,
    pairwise_value_breakdown,
)
from .robust_regress import ALL_AXES, BASELINE, RegressionRow

logger = logging.getLogger(__name__)

HASH_COLUMN = "manifest_hash"

SIGN_ERRORS_CSV = "sign_errors.csv"
FAMILY_SUMMARY_CSV = "family_summary.csv"
FAMILY_SUMMARY_UNFILTERED_CSV = "family_summary_unfiltered.csv"
NEFF_COUNTS_CSV = "neff_counts.csv"
FAILURES_CSV = "failures.csv"
REGRESSION_CSV = "regression.csv"
CDF_SVG = "sign_error_cdf.svg"
REGRESSION_SVG = "regression.svg"
SUMMARY_MD = "summary.md"

SIGN_ERROR_COLUMNS = (
    "env_id",
    "axis",
    "value_a",
    "value_b",
    "fixed",
    "measure",
    "sign_error",
    "n_eff",
    "n_pairs_used",
    "n_pairs_dropped",
)
FAMILY_COLUMNS = (
    "family_kind",
    "family",
    "measure",
    "n_environments",
    "n_retained",
    "median",
    "mean",
    "p90",
    "max",
)
NEFF_COLUMNS = ("family", "threshold", "n_environments")
FAILURE_COLUMNS = ("measure", "threshold", *SIGN_ERROR_COLUMNS[:5], "sign_error", "n_eff")
REGRESSION_COLUMNS = (
    "measure",
    "a",
    "b",
    "robust_rmse",
    "mean_rmse",
    "baseline_robust_rmse",
    "linear_robust_rmse",
    "family_kind",
    "n_envs",
    "axis",
    "degenerate",
)

FLOAT_FORMAT = "%.10g"

# Figure palette
SHADE = "#9ecae1"
MAX_COLOR = "#2ca02c"
P90_COLOR = "#e377c2"
MEAN_COLOR = "#ff7f0e"
NO_DATA_COLOR = "#d62728"
ROBUST_COLOR = "#000000"
BASELINE_COLOR = "#d62728"

LABEL_WIDTH = 150
CELL_WIDTH = 110
CELL_HEIGHT = 18
HEADER_HEIGHT = 40
PADDING = 4


class ReportInputError(ValueError):
    """Raised when an input table is missing, malformed or from another manifest."""


# ---------------------------------------------------------------------------
# CSV tables
# ---------------------------------------------------------------------------


def _fixed_text(fixed: Sequence[tuple[str, Any]]) -> str:
    return ",".join(f"{axis}={value}" for axis, value in fixed)


def _write_table(
    rows: Sequence[Mapping[str, Any]],
    columns: Sequence[str],
    path: Union[str, Path],
    manifest_hash: str,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(list(rows), columns=list(columns))
    frame[HASH_COLUMN] = manifest_hash
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    logger.info("Wrote %d row(s) to %s", len(frame), path)
    return path


def _stat_row(stat: SignErrorStat) -> dict[str, Any]:
    return {
        "env_id": stat.env_id,
        "axis": stat.axis,
        "value_a": stat.value_pair[0],
        "value_b": stat.value_pair[1],
        "fixed": _fixed_text(stat.fixed),
        "measure": stat.measure,
        "sign_error": stat.value,
        "n_eff": stat.n_eff,
        "n_pairs_used": stat.n_pairs_used,
        "n_pairs_dropped": stat.n_pairs_dropped,
    }


def write_sign_errors(
    stats: Iterable[SignErrorStat], path: Union[str, Path], manifest_hash: str
) -> Path:
    return _write_table([_stat_row(s) for s in stats], SIGN_ERROR_COLUMNS, path, manifest_hash)


def write_family_summaries(
    summaries: Iterable[FamilySummary],
    path: Union[str, Path],
    manifest_hash: str,
    family_kind: str = STRICT,
) -> Path:
    rows = [
        {
            "family_kind": family_kind,
            "family": s.family,
            "measure": s.measure,
            "n_environments": s.n_environments,
            "n_retained": s.n_retained,
            "median": s.median,
            "mean": s.mean,
            "p90": s.p90,
            "max": s.max,
        }
        for s in summaries
    ]
    return _write_table(rows, FAMILY_COLUMNS, path, manifest_hash)


def write_neff_counts(
    counts: Mapping[str, Mapping[float, int]], path: Union[str, Path], manifest_hash: str
) -> Path:
    rows = [
        {"family": family, "threshold": threshold, "n_environments": n}
        for family, by_threshold in counts.items()
        for threshold, n in by_threshold.items()
    ]
    return _write_table(rows, NEFF_COLUMNS, path, manifest_hash)


def write_failures(
    failures: Mapping[str, Sequence[SignErrorStat]],
    threshold: float,
    path: Union[str, Path],
    manifest_hash: str,
) -> Path:
    rows = []
    for measure, stats in failures.items():
        for stat in stats:
            row = _stat_row(stat)
            rows.append(
                {
                    "measure": measure,
                    "threshold": threshold,
                    **{column: row[column] for column in FAILURE_COLUMNS[2:]},
                }
            )
    return _write_table(rows, FAILURE_COLUMNS, path, manifest_hash)


def write_regression(
    rows: Iterable[RegressionRow], path: Union[str, Path], manifest_hash: str
) -> Path:
    table = [{column: getattr(row, column) for column in REGRESSION_COLUMNS} for row in rows]
    return _write_table(table, REGRESSION_COLUMNS, path, manifest_hash)


def _read_table(
    path: Union[str, Path], columns: Sequence[str]
) -> tuple[pd.DataFrame, Optional[str]]:
    """Read a table as strings with its manifest hash (None for a header-only table)."""
    path = Path(path)
    if not path.exists():
        raise ReportInputError(f"Missing input table {path}")
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as e:
        raise ReportInputError(f"Malformed CSV {path}: {e}") from e

    missing = [c for c in (*columns, HASH_COLUMN) if c not in frame.columns]
    if missing:
        raise ReportInputError(f"{path} lacks column(s): {', '.join(missing)}")
    hashes = sorted(set(frame[HASH_COLUMN]))
    if not hashes:
        return frame, None
    if len(hashes) > 1:
        raise ReportInputError(f"{path} mixes manifest hashes: {', '.join(hashes)}")
    if not hashes[0]:
        raise ReportInputError(f"{path} carries no manifest hash")
    return frame, hashes[0]


def _float(text: str, path: Path, row: int, column: str) -> Optional[float]:
    if text == "":
        return None
    try:
        return float(text)
    except ValueError:
        raise ReportInputError(
            f"{path}: row {row + 1}, column {column}: not a number: {text!r}"
        ) from None


def _int(text: str, path: Path, row: int, column: str) -> int:
    value = _float(text, path, row, column)
    if value is None or not value.is_integer():
        raise ReportInputError(f"{path}: row {row + 1}, column {column}: not an integer")
    return int(value)


def _parse_fixed(text: str) -> tuple[tuple[str, str], ...]:
    if not text:
        return ()
    return tuple(tuple(item.split("=", 1)) for item in text.split(","))


def _typed_values(values: Iterable[str]) -> dict[str, Any]:
    """Map the values of one axis back to numbers when every one of them is numeric."""
    values = set(values)
    try:
        parsed = {v: float(v) for v in values}
    except ValueError:
        return {v: v for v in values}
    return {v: int(x) if x.is_integer() and "." not in v else x for v, x in parsed.items()}


def read_sign_errors(path: Union[str, Path]) -> tuple[list[SignErrorStat], Optional[str]]:
    path = Path(path)
    frame, manifest_hash = _read_table(path, SIGN_ERROR_COLUMNS)
    typed: dict[str, dict[str, Any]] = {}
    for axis, group in frame.groupby("axis", sort=False):
        typed[axis] = _typed_values([*group["value_a"], *group["value_b"]])

    stats = []
    for i, row in enumerate(frame.to_dict("records")):
        values = typed[row["axis"]]
        stats.append(
            SignErrorStat(
                env_id=row["env_id"],
                axis=row["axis"],
                value_pair=(values[row["value_a"]], values[row["value_b"]]),
                measure=row["measure"],
                value=_float(row["sign_error"], path, i, "sign_error"),
                n_eff=_float(row["n_eff"], path, i, "n_eff") or 0.0,
                n_pairs_used=_int(row["n_pairs_used"], path, i, "n_pairs_used"),
                n_pairs_dropped=_int(row["n_pairs_dropped"], path, i, "n_pairs_dropped"),
                fixed=_parse_fixed(row["fixed"]),
            )
        )
    return stats, manifest_hash


def read_family_summaries(path: Union[str, Path]) -> tuple[list[FamilySummary], str, Optional[str]]:
    """Return (summaries, family_kind, manifest_hash)."""
    path = Path(path)
    frame, manifest_hash = _read_table(path, FAMILY_COLUMNS)
    kinds = sorted(set(frame["family_kind"]))
    if len(kinds) > 1:
        raise ReportInputError(f"{path} mixes family kinds: {', '.join(kinds)}")
    if kinds and kinds[0] not in (STRICT, WEAK):
        raise ReportInputError(f"{path}: unknown family kind {kinds[0]!r}")

    summaries = []
    for i, row in enumerate(frame.to_dict("records")):
        summaries.append(
            FamilySummary(
                family=row["family"],
                measure=row["measure"],
                n_environments=_int(row["n_environments"], path, i, "n_environments"),
                n_retained=_int(row["n_retained"], path, i, "n_retained"),
                median=_float(row["median"], path, i, "median"),
                mean=_float(row["mean"], path, i, "mean"),
                p90=_float(row["p90"], path, i, "p90"),
                max=_float(row["max"], path, i, "max"),
            )
        )
    return summaries, kinds[0] if kinds else STRICT, manifest_hash


def read_failures(path: Union[str, Path]) -> tuple[list[dict[str, Any]], Optional[str]]:
    path = Path(path)
    frame, manifest_hash = _read_table(path, FAILURE_COLUMNS)
    rows = []
    for i, row in enumerate(frame.to_dict("records")):
        row = dict(row)
        row["sign_error"] = _float(row["sign_error"], path, i, "sign_error")
        row["n_eff"] = _float(row["n_eff"], path, i, "n_eff")
        rows.append(row)
    return rows, manifest_hash


def read_regression(path: Union[str, Path]) -> tuple[list[RegressionRow], Optional[str]]:
    path = Path(path)
    frame, manifest_hash = _read_table(path, REGRESSION_COLUMNS)
    rows = []
    for i, row in enumerate(frame.to_dict("records")):
        numbers = {
            column: _float(row[column], path, i, column)
            for column in ("a", "b", "robust_rmse", "mean_rmse", "baseline_robust_rmse")
        }
        if any(value is None for value in numbers.values()):
            raise ReportInputError(f"{path}: row {i + 1} has an empty fit column")
        rows.append(
            RegressionRow(
                measure=row["measure"],
                linear_robust_rmse=_float(row["linear_robust_rmse"], path, i, "linear"),
                family_kind=row["family_kind"],
                n_envs=_int(row["n_envs"], path, i, "n_envs"),
                axis=row["axis"],
                degenerate=row["degenerate"] == "True",
                **numbers,
            )
        )
    return rows, manifest_hash


def check_same_manifest(hashes: Mapping[str, Optional[str]]) -> Optional[str]:
    """
    Return the common hash of several inputs or raise when they disagree; empty inputs pass.

    A hash qualified by evaluation settings (``<manifest>-<settings>``) agrees with the bare
    hash of its manifest, but not with a different qualification of it.
    """
    distinct = sorted({value for value in hashes.values() if value is not None})
    if not distinct:
        return None
    manifests = {value.split("-", 1)[0] for value in distinct}
    qualified = [value for value in distinct if "-" in value]
    if len(manifests) > 1 or len(qualified) > 1:
        detail = ", ".join(f"{name}={value}" for name, value in sorted(hashes.items()))
        raise ReportInputError(f"Inputs come from different manifests: {detail}")
    return qualified[0] if qualified else distinct[0]


# ---------------------------------------------------------------------------
# SVG figures
# ---------------------------------------------------------------------------


def _escape_xml(text: Any) -> str:
    return (
        str(text)
        .replace("&", "&amp;")
        .replace("<", "&lt;")
        .replace(">", "&gt;")
        .replace('"', "&quot;")
    )


def _svg_document(width: float, height: float, manifest_hash: str, body: list[str]) -> str:
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0f}" height="{height:.0f}" '
        f'viewBox="0 0 {width:.0f} {height:.0f}" font-family="Arial,sans-serif">',
        f"<metadata>manifest_hash={_escape_xml(manifest_hash)}</metadata>",
        f'<rect width="{width:.0f}" height="{height:.0f}" fill="white"/>',
        *body,
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def _text(x: float, y: float, text: Any, size: int = 10, anchor: str = "start", **attrs) -> str:
    extra = "".join(f' {key.replace("_", "-")}="{value}"' for key, value in attrs.items())
    return (
        f'<text x="{x:.2f}" y="{y:.2f}" font-size="{size}" text-anchor="{anchor}"{extra}>'
        f"{_escape_xml(text)}</text>"
    )


def _vline(x: float, y: float, height: float, color: str, width: float = 1.5) -> str:
    return (
        f'<line x1="{x:.2f}" y1="{y:.2f}" x2="{x:.2f}" y2="{y + height:.2f}" '
        f'stroke="{color}" stroke-width="{width}"/>'
    )


def _red_x(x: float, y: float, width: float, height: float) -> list[str]:
    cx, cy, r = x + width / 2, y + height / 2, min(width, height) / 2 - 2
    return [
        f'<line x1="{cx - r:.2f}" y1="{cy - r:.2f}" x2="{cx + r:.2f}" y2="{cy + r:.2f}" '
        f'stroke="{NO_DATA_COLOR}" stroke-width="2"/>',
        f'<line x1="{cx - r:.2f}" y1="{cy + r:.2f}" x2="{cx + r:.2f}" y2="{cy - r:.2f}" '
        f'stroke="{NO_DATA_COLOR}" stroke-width="2"/>',
    ]


def _cdf_cell(x: float, y: float, width: float, height: float, summary: Optional[FamilySummary]):
    """One CDF bar on a [0, 1] sign-error scale: shaded from median to max, three markers."""
    parts = [
        f'<rect x="{x:.2f}" y="{y:.2f}" width="{width:.2f}" height="{height:.2f}" '
        f'fill="none" stroke="#cccccc" stroke-width="0.5"/>'
    ]
    if summary is None or summary.no_data:
        return parts + _red_x(x, y, width, height)

    def at(value: float) -> float:
        return x + value * width

    shade_width = max(at(summary.max) - at(summary.median), 1.0)
    parts.append(
        f'<rect x="{at(summary.median):.2f}" y="{y + 2:.2f}" width="{shade_width:.2f}" '
        f'height="{height - 4:.2f}" fill="{SHADE}"/>'
    )
    parts.append(_vline(at(summary.mean), y + 1, height - 2, MEAN_COLOR))
    parts.append(_vline(at(summary.p90), y + 1, height - 2, P90_COLOR))
    parts.append(_vline(at(summary.max), y + 1, height - 2, MAX_COLOR))
    return parts


def _legend(x: float, y: float) -> list[str]:
    parts = []
    for i, (label, color) in enumerate(
        (("max", MAX_COLOR), ("p90", P90_COLOR), ("mean", MEAN_COLOR))
    ):
        parts.append(_vline(x + i * 60, y - 9, 10, color, width=2))
        parts.append(_text(x + i * 60 + 5, y, label, size=9))
    return parts


def render_cdf_svg(
    summaries: Sequence[FamilySummary], manifest_hash: str, family_kind: str = STRICT
) -> str:
    """
    Grid of CDF bars: one row per measure, one column per family (All first).

    Rows are ordered by the All-family mean, or by the All-family max for weak families.
    """
    order = measure_order(summaries, key="max" if family_kind == WEAK else "mean")
    families: list[str] = []
    for summary in summaries:
        if summary.family not in families:
            families.append(summary.family)
    if ALL_FAMILY in families:
        families.remove(ALL_FAMILY)
        families.insert(0, ALL_FAMILY)
    cells = {(s.measure, s.family): s for s in summaries}

    width = LABEL_WIDTH + len(families) * (CELL_WIDTH + PADDING) + PADDING
    height = HEADER_HEIGHT + len(order) * (CELL_HEIGHT + PADDING) + 2 * PADDING + 14
    body = [_text(PADDING, 14, f"Sign-error by family ({family_kind})", size=12)]
    body.extend(_legend(LABEL_WIDTH, 14))
    for j, family in enumerate(families):
        x = LABEL_WIDTH + j * (CELL_WIDTH + PADDING)
        body.append(_text(x + CELL_WIDTH / 2, HEADER_HEIGHT - 6, family, anchor="middle"))
    for i, measure in enumerate(order):
        y = HEADER_HEIGHT + i * (CELL_HEIGHT + PADDING)
        body.append(_text(LABEL_WIDTH - PADDING, y + CELL_HEIGHT - 5, measure, anchor="end"))
        for j, family in enumerate(families):
            x = LABEL_WIDTH + j * (CELL_WIDTH + PADDING)
            body.extend(_cdf_cell(x, y, CELL_WIDTH, CELL_HEIGHT, cells.get((measure, family))))
    axis_y = HEADER_HEIGHT + len(order) * (CELL_HEIGHT + PADDING) + 10
    for j in range(len(families)):
        x = LABEL_WIDTH + j * (CELL_WIDTH + PADDING)
        body.append(_text(x, axis_y, "0", size=8))
        body.append(_text(x + CELL_WIDTH, axis_y, "1", size=8, anchor="end"))
    return _svg_document(width, height, manifest_hash, body)


def render_pairwise_svg(stats: Sequence[SignErrorStat], measure: str, manifest_hash: str) -> str:
    """
    Upper-triangle grids of value-pair cells for one measure, one grid per axis.

    Cell (i, j) summarizes the environments that move the axis from its i-th to its
    j-th value; pairs without retained environments show a red X.
    """
    axes: list[str] = []
    for stat in stats:
        if stat.measure == measure and stat.axis not in axes:
            axes.append(stat.axis)

    body = [_text(PADDING, 14, f"Sign-error by value pair: {measure}", size=12)]
    body.extend(_legend(LABEL_WIDTH + 120, 14))
    y = HEADER_HEIGHT
    width = LABEL_WIDTH
    for axis in axes:
        breakdown = pairwise_value_breakdown(stats, measure, axis)
        values = sorted({v for pair in breakdown for v in pair})
        body.append(_text(PADDING, y + 10, axis, size=11, font_weight="bold"))
        y += 16
        for j, value in enumerate(values[1:]):
            x = LABEL_WIDTH + j * (CELL_WIDTH + PADDING)
            body.append(_text(x + CELL_WIDTH / 2, y + 8, value, size=9, anchor="middle"))
        y += 12
        for i, row_value in enumerate(values[:-1]):
            body.append(_text(LABEL_WIDTH - PADDING, y + CELL_HEIGHT - 5, row_value, anchor="end"))
            for j, col_value in enumerate(values[1:]):
                if j < i:
                    continue
                x = LABEL_WIDTH + j * (CELL_WIDTH + PADDING)
                cell = breakdown.get((row_value, col_value))
                body.extend(_cdf_cell(x, y, CELL_WIDTH, CELL_HEIGHT, cell))
            y += CELL_HEIGHT + PADDING
        width = max(width, LABEL_WIDTH + (len(values) - 1) * (CELL_WIDTH + PADDING))
        y += 2 * PADDING
    if not axes:
        body.append(_text(PADDING, y + 10, "No environments for this measure."))
        y += 20
    return _svg_document(max(width + PADDING, 400), y + PADDING, manifest_hash, body)


def render_regression_svg(rows: Sequence[RegressionRow], manifest_hash: str) -> str:
    """Robust (black) and mean (orange) RMSE per measure against the bias-only baseline (red)."""
    rows = [row for row in rows if row.axis == ALL_AXES]
    fitted = sorted(
        (row for row in rows if row.measure != BASELINE),
        key=lambda row: (row.robust_rmse, row.measure),
    )
    baseline = next((row for row in rows if row.measure == BASELINE), None)
    scale_max = max([row.robust_rmse for row in rows] + [1e-12])

    plot_width = 400
    width = LABEL_WIDTH + plot_width + 3 * PADDING
    height = HEADER_HEIGHT + len(fitted) * (CELL_HEIGHT + PADDING) + 24

    def at(value: float) -> float:
        return LABEL_WIDTH + value / scale_max * plot_width

    kind = rows[0].family_kind if rows else ""
    body = [_text(PADDING, 14, f"Robust regression ({kind})", size=12)]
    for i, (label, color) in enumerate(
        (("robust", ROBUST_COLOR), ("mean", MEAN_COLOR), ("baseline", BASELINE_COLOR))
    ):
        body.append(f'<circle cx="{LABEL_WIDTH + i * 70:.2f}" cy="28" r="3" fill="{color}"/>')
        body.append(_text(LABEL_WIDTH + i * 70 + 6, 31, label, size=9))
    for i, row in enumerate(fitted):
        y = HEADER_HEIGHT + i * (CELL_HEIGHT + PADDING) + CELL_HEIGHT / 2
        body.append(_text(LABEL_WIDTH - PADDING, y + 4, row.measure, anchor="end"))
        body.append(
            f'<line x1="{at(row.mean_rmse):.2f}" y1="{y:.2f}" x2="{at(row.robust_rmse):.2f}" '
            f'y2="{y:.2f}" stroke="#999999" stroke-width="1"/>'
        )
        body.append(
            f'<circle cx="{at(row.mean_rmse):.2f}" cy="{y:.2f}" r="3" fill="{MEAN_COLOR}"/>'
        )
        body.append(
            f'<circle cx="{at(row.robust_rmse):.2f}" cy="{y:.2f}" r="3" fill="{ROBUST_COLOR}"/>'
        )
    plot_bottom = HEADER_HEIGHT + len(fitted) * (CELL_HEIGHT + PADDING)
    if baseline is not None:
        span = plot_bottom - HEADER_HEIGHT
        body.append(_vline(at(baseline.robust_rmse), HEADER_HEIGHT, span, BASELINE_COLOR))
    body.append(_text(LABEL_WIDTH, plot_bottom + 14, "0", size=8))
    body.append(
        _text(LABEL_WIDTH + plot_width, plot_bottom + 14, f"{scale_max:.4f}", size=8, anchor="end")
    )
    return _svg_document(width, height, manifest_hash, body)


# ---------------------------------------------------------------------------
# Markdown summary
# ---------------------------------------------------------------------------


def _fmt(value: Optional[float], digits: int = 3) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def robust_failures(summaries: Iterable[FamilySummary]) -> list[str]:
    """Measures whose worst retained All-family sign-error is 1."""
    return sorted(
        s.measure
        for s in summaries
        if s.family == ALL_FAMILY and s.max is not None and s.max >= 1.0
    )


def render_summary_markdown(
    summaries: Sequence[FamilySummary],
    manifest_hash: str,
    *,
    family_kind: str = STRICT,
    unfiltered: Optional[Sequence[FamilySummary]] = None,
    regression: Optional[Sequence[RegressionRow]] = None,
    failures: Optional[Sequence[Mapping[str, Any]]] = None,
) -> str:
    key = "max" if family_kind == WEAK else "mean"
    order = measure_order(summaries, key=key)
    all_rows = {s.measure: s for s in summaries if s.family == ALL_FAMILY}

    lines = [
        "# Generalization measure sign-errors",
        "",
        f"- Manifest: `{manifest_hash}`",
        f"- Environment family: {family_kind}",
        "",
        "## All environments",
        "",
        "| Measure | Retained | Median | Mean | P90 | Max |",
        "|---|---|---|---|---|---|",
    ]
    for measure in order:
        s = all_rows[measure]
        lines.append(
            f"| {measure} | {s.n_retained}/{s.n_environments} | {_fmt(s.median)} | "
            f"{_fmt(s.mean)} | {_fmt(s.p90)} | {_fmt(s.max)} |"
        )

    lines += ["", "## Robustness", ""]
    failing = robust_failures(summaries)
    if failing:
        lines.append(
            "Measures reaching robust sign-error 1.0 in the All family: "
            + ", ".join(f"`{m}`" for m in failing)
            + "."
        )
    else:
        lines.append("No measure reaches robust sign-error 1.0 in the All family at this scale.")

    if unfiltered is not None:
        raw = {s.measure: s for s in unfiltered if s.family == ALL_FAMILY}
        lines += [
            "",
            "## Noise-filter ablation",
            "",
            "| Measure | Mean (filtered) | Mean (unfiltered) | Max (filtered) | Max (unfiltered) |",
            "|---|---|---|---|---|",
        ]
        for measure in order:
            s, u = all_rows[measure], raw.get(measure)
            lines.append(
                f"| {measure} | {_fmt(s.mean)} | {_fmt(u.mean if u else None)} | "
                f"{_fmt(s.max)} | {_fmt(u.max if u else None)} |"
            )

    if regression:
        lines += [
            "",
            f"## Robust regression ({regression[0].family_kind})",
            "",
            "| Measure | a | b | Robust RMSE | Mean RMSE | Linear robust RMSE |",
            "|---|---|---|---|---|---|",
        ]
        for row in sorted(
            (r for r in regression if r.axis == ALL_AXES),
            key=lambda r: (r.measure == BASELINE, r.robust_rmse, r.measure),
        ):
            lines.append(
                f"| {row.measure} | {row.a:.4g} | {row.b:.4g} | {_fmt(row.robust_rmse, 4)} | "
                f"{_fmt(row.mean_rmse, 4)} | {_fmt(row.linear_robust_rmse, 4)} |"
            )

    if failures:
        lines += [
            "",
            "## Failing environments",
            "",
            "| Measure | Environment | Sign-error | n_eff |",
            "|---|---|---|---|",
        ]
        for row in failures:
            lines.append(
                f"| {row['measure']} | `{row['env_id']}` | {_fmt(row['sign_error'])} | "
                f"{_fmt(row['n_eff'], 1)} |"
            )
    return "\n".join(lines) + "\n"


def write_text(path: Union[str, Path], content: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(content)
    return path
