#!/usr/bin/env python3
"""
Command-line interface for robustgen.

Usage:
    robustgen generate [--config manifest.yaml]
    robustgen measure [--recompute]
    robustgen evaluate [--axes AXIS ...] [--n-eff-min N] [--no-noise-filter] [--weak]
    robustgen regress [--family KIND]
    robustgen report [--measure MEASURE]

Examples:
    robustgen generate --config sweep.yaml
    robustgen evaluate --axes train_size depth --ablation
    robustgen report --measure path.norm
"""

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path
from typing import NoReturn

from dotenv import load_dotenv

from . import __version__
from .config_manager import ManifestError, RunManifest, load_manifest
from .measures import MEASURE_IDS, is_measured, measure_records
from .nn_core import CheckpointError
from .records import AXES, RecordStore, StoreError
from .report import (
    CDF_SVG,
    FAILURES_CSV,
    FAMILY_SUMMARY_CSV,
    FAMILY_SUMMARY_UNFILTERED_CSV,
    NEFF_COUNTS_CSV,
    REGRESSION_CSV,
    REGRESSION_SVG,
    SIGN_ERRORS_CSV,
    SUMMARY_MD,
    ReportInputError,
    check_same_manifest,
    read_failures,
    read_family_summaries,
    read_regression,
    read_sign_errors,
    render_cdf_svg,
    render_pairwise_svg,
    render_regression_svg,
    render_summary_markdown,
    robust_failures,
    write_failures,
    write_family_summaries,
    write_neff_counts,
    write_regression,
    write_sign_errors,
    write_text,
)
from .robust_eval import (
    ALL_FAMILY,
    STRICT,
    WEAK,
    build_coupled_environments,
    build_weak_environments,
    evaluate_environments,
    failing_environments,
    family_summaries,
    measure_order,
    neff_threshold_counts,
)
from .robust_regress import REGRESSION_FAMILIES, build_regression_environments, regression_report
from .trainer import IngestionError, expand_grid, filter_records, run_grid

load_dotenv()

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2
EXIT_EMPTY = 3
EXIT_MALFORMED = 4

NEFF_THRESHOLDS = (1, 2, 4, 8, 12, 16, 24, 32, 48, 64)
DEFAULT_FAILURE_THRESHOLD = 0.01
LOG_LEVELS = ("DEBUG", "INFO", "WARNING", "ERROR")


def fail(message: str, code: int) -> NoReturn:
    print(f"Error: {message}", file=sys.stderr)
    sys.exit(code)


def resolve_manifest(args) -> RunManifest:
    """Load the manifest and apply --store / --out overrides."""
    manifest = load_manifest(args.config)
    overrides = {}
    if getattr(args, "store", None):
        overrides["store_path"] = Path(args.store)
    if getattr(args, "out", None):
        overrides["output_dir"] = Path(args.out)
    if overrides:
        manifest = dataclasses.replace(manifest, **overrides)
    return manifest


def _load_converged(manifest: RunManifest, subset=None):
    store = RecordStore(manifest.store_path)
    records = store.load()
    if not records:
        fail(f"record store {manifest.store_path} is empty; run 'generate' first", EXIT_EMPTY)
    records = filter_records(records)
    if subset:
        records = [record for record in records if record.config.dataset_id in subset]
    if not records:
        fail("no converged records to evaluate", EXIT_EMPTY)
    if not any(is_measured(record) for record in records):
        fail("no record carries measure values; run 'measure' first", EXIT_EMPTY)
    return records


def cmd_generate(args):
    manifest = resolve_manifest(args)
    store = RecordStore(manifest.store_path)
    n_configs = len(expand_grid(manifest.grid))
    print(f"Manifest {manifest.hash}: {n_configs} config(s) x {manifest.num_seeds} seed(s)")

    new_records = run_grid(
        manifest.grid,
        manifest.datasets,
        store,
        num_seeds=manifest.num_seeds,
        settings=manifest.training,
        master_seed=manifest.master_seed,
        workers=manifest.workers,
    )
    records = store.load()
    converged = sum(1 for record in records if record.converged)
    failed = len(records) - converged
    print(f"Trained {len(new_records)} new run(s); {manifest.store_path} holds {len(records)}.")
    print(f"Converged: {converged}, failed: {failed}")
    if failed:
        print(f"{failed} runs failed to meet the cross-entropy criterion")


def cmd_measure(args):
    manifest = resolve_manifest(args)
    store = RecordStore(manifest.store_path)
    records = store.load()
    if not records:
        fail(f"record store {manifest.store_path} is empty; run 'generate' first", EXIT_EMPTY)

    updated, skipped = measure_records(
        records,
        store.directory,
        manifest.datasets,
        manifest.measures,
        test_size=manifest.training.test_size,
        master_seed=manifest.master_seed,
        recompute=args.recompute,
    )
    store.rewrite(updated)

    converged = [record for record in updated if record.converged]
    measured = sum(1 for record in converged if is_measured(record))
    print(f"Measured {measured}/{len(converged)} converged record(s).")
    if skipped:
        print(f"Skipped {len(skipped)} record(s):", file=sys.stderr)
        for (config_id, seed), reason in skipped:
            print(f"  {config_id} seed {seed}: {reason}", file=sys.stderr)


def cmd_evaluate(args):
    manifest = resolve_manifest(args)
    records = _load_converged(manifest, args.subset)
    axes = tuple(args.axes) if args.axes else manifest.evaluation.axes
    n_eff_min = args.n_eff_min if args.n_eff_min is not None else manifest.evaluation.n_eff_min
    noise_filter = manifest.evaluation.noise_filter and not args.no_noise_filter
    family_kind = WEAK if args.weak else STRICT

    if args.weak:
        environments = build_weak_environments(records, axes)
    else:
        environments = build_coupled_environments(records, axes)
    if not environments:
        fail("no environments could be formed from the converged records", EXIT_EMPTY)

    stats = evaluate_environments(environments, MEASURE_IDS, n_eff_min, noise_filter)
    summaries = family_summaries(stats, MEASURE_IDS, axes)

    out = manifest.output_dir
    digest = manifest.settings_hash(
        axes=list(axes),
        n_eff_min=float(n_eff_min),
        noise_filter=noise_filter,
        family_kind=family_kind,
        subset=sorted(args.subset) if args.subset else None,
    )
    write_sign_errors(stats, out / SIGN_ERRORS_CSV, digest)
    write_family_summaries(summaries, out / FAMILY_SUMMARY_CSV, digest, family_kind)
    write_neff_counts(neff_threshold_counts(stats, NEFF_THRESHOLDS), out / NEFF_COUNTS_CSV, digest)
    failures = {
        measure: failing_environments(stats, measure, args.failure_threshold)
        for measure in MEASURE_IDS
    }
    failures = {measure: found for measure, found in failures.items() if found}
    write_failures(failures, args.failure_threshold, out / FAILURES_CSV, digest)

    if args.ablation and noise_filter:
        raw_stats = evaluate_environments(environments, MEASURE_IDS, n_eff_min, False)
        write_family_summaries(
            family_summaries(raw_stats, MEASURE_IDS, axes),
            out / FAMILY_SUMMARY_UNFILTERED_CSV,
            digest,
            family_kind,
        )
    else:
        (out / FAMILY_SUMMARY_UNFILTERED_CSV).unlink(missing_ok=True)

    retained = len({stat.env_id for stat in stats if not stat.discarded})
    filter_state = "on" if noise_filter else "off"
    print(
        f"{len(environments)} {family_kind} environment(s), {retained} retained "
        f"(n_eff >= {n_eff_min:g}, noise filter {filter_state})"
    )
    all_rows = {s.measure: s for s in summaries if s.family == ALL_FAMILY}
    for measure in measure_order(summaries, key="max" if args.weak else "mean"):
        s = all_rows[measure]
        if s.no_data:
            print(f"  {measure:<32} no environments retained")
        else:
            print(f"  {measure:<32} mean {s.mean:.3f}  max {s.max:.3f}")
    print(f"Wrote results to {out}")


def cmd_regress(args):
    manifest = resolve_manifest(args)
    records = _load_converged(manifest)
    kind = args.family or manifest.regression_family
    family = build_regression_environments(records, kind, manifest.evaluation.axes)
    if not family.environments:
        fail(f"no {kind} regression environments could be formed", EXIT_EMPTY)

    rows = regression_report(family, MEASURE_IDS, per_axis=True)
    path = write_regression(rows, manifest.output_dir / REGRESSION_CSV, manifest.hash)

    print(f"{kind}: {len(family.environments)} environment(s)")
    for row in sorted((r for r in rows if r.axis == "all"), key=lambda r: r.robust_rmse):
        print(f"  {row.measure:<32} robust RMSE {row.robust_rmse:.4f}  mean {row.mean_rmse:.4f}")
    print(f"Wrote {path}")


def cmd_report(args):
    manifest = resolve_manifest(args)
    out = manifest.output_dir

    summaries, family_kind, summary_hash = read_family_summaries(out / FAMILY_SUMMARY_CSV)
    if not summaries:
        fail(f"{out / FAMILY_SUMMARY_CSV} has no rows", EXIT_EMPTY)
    hashes = {FAMILY_SUMMARY_CSV: summary_hash}

    unfiltered = regression = failures = stats = None
    if (out / FAMILY_SUMMARY_UNFILTERED_CSV).exists():
        unfiltered, _, hashes[FAMILY_SUMMARY_UNFILTERED_CSV] = read_family_summaries(
            out / FAMILY_SUMMARY_UNFILTERED_CSV
        )
    if (out / REGRESSION_CSV).exists():
        regression, hashes[REGRESSION_CSV] = read_regression(out / REGRESSION_CSV)
    if (out / FAILURES_CSV).exists():
        failures, hashes[FAILURES_CSV] = read_failures(out / FAILURES_CSV)
    if args.measure:
        stats, hashes[SIGN_ERRORS_CSV] = read_sign_errors(out / SIGN_ERRORS_CSV)
    digest = check_same_manifest(hashes)

    written = [write_text(out / CDF_SVG, render_cdf_svg(summaries, digest, family_kind))]
    if regression:
        written.append(write_text(out / REGRESSION_SVG, render_regression_svg(regression, digest)))
    if stats is not None:
        svg = render_pairwise_svg(stats, args.measure, digest)
        written.append(write_text(out / f"pairwise_{args.measure}.svg", svg))
    markdown = render_summary_markdown(
        summaries,
        digest,
        family_kind=family_kind,
        unfiltered=unfiltered,
        regression=regression,
        failures=failures,
    )
    written.append(write_text(out / SUMMARY_MD, markdown))

    failing = robust_failures(summaries)
    if failing:
        print(f"Robust sign-error 1.0 reached by: {', '.join(failing)}")
    else:
        print("No measure reaches robust sign-error 1.0 in the All family at this scale.")
    for path in written:
        print(f"Wrote {path}")


def add_common_args(parser):
    """Add the manifest and output options shared by every subcommand."""
    parser.add_argument("--config", default=None, help="Run manifest (YAML) overriding defaults")
    parser.add_argument("--store", default=None, help="Record store path (overrides manifest)")
    parser.add_argument("--out", default=None, help="Output directory (overrides manifest)")
    parser.add_argument(
        "--log-level",
        choices=LOG_LEVELS,
        default="WARNING",
        help="Logging verbosity (default: WARNING)",
    )


def main():
    prog_name = os.path.basename(sys.argv[0]) or "robustgen"

    parser = argparse.ArgumentParser(
        prog=prog_name,
        description="Train network sweeps and evaluate generalization measures robustly",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"""
Examples:
  {prog_name} generate --config sweep.yaml
  {prog_name} measure
  {prog_name} evaluate --axes train_size depth --ablation
  {prog_name} evaluate --weak --subset teacher
  {prog_name} regress --family all_but_one_fixed
  {prog_name} report --measure path.norm
        """,
    )
    parser.add_argument("-v", "--version", action="version", version=f"%(prog)s {__version__}")

    subparsers = parser.add_subparsers(dest="command", metavar="command")

    generate_parser = subparsers.add_parser("generate", help="Train every (config, seed) run")
    add_common_args(generate_parser)
    generate_parser.set_defaults(func=cmd_generate)

    measure_parser = subparsers.add_parser(
        "measure", help="Compute generalization measures for converged runs"
    )
    add_common_args(measure_parser)
    measure_parser.add_argument(
        "--recompute", action="store_true", help="Recompute records that already have measures"
    )
    measure_parser.set_defaults(func=cmd_measure)

    evaluate_parser = subparsers.add_parser(
        "evaluate", help="Sign-errors over coupled-network environments"
    )
    add_common_args(evaluate_parser)
    evaluate_parser.add_argument(
        "--axes", nargs="+", choices=AXES, default=None, help="Axes to vary (default: manifest)"
    )
    evaluate_parser.add_argument(
        "--n-eff-min",
        type=float,
        default=None,
        help="Minimum effective sample size to keep an environment (default: manifest)",
    )
    evaluate_parser.add_argument(
        "--no-noise-filter",
        action="store_true",
        help="Weight every pair equally instead of discounting Monte Carlo noise",
    )
    evaluate_parser.add_argument(
        "--weak", action="store_true", help="Merge environments sharing an axis value pair"
    )
    evaluate_parser.add_argument(
        "--subset", nargs="+", default=None, help="Restrict to these dataset ids"
    )
    evaluate_parser.add_argument(
        "--ablation",
        action="store_true",
        help="Also write family summaries computed without the noise filter",
    )
    evaluate_parser.add_argument(
        "--failure-threshold",
        type=float,
        default=DEFAULT_FAILURE_THRESHOLD,
        help=f"Sign-error above which environments are listed as failures "
        f"(default: {DEFAULT_FAILURE_THRESHOLD})",
    )
    evaluate_parser.set_defaults(func=cmd_evaluate)

    regress_parser = subparsers.add_parser(
        "regress", help="Fit robust affine transformations of each measure to the gap"
    )
    add_common_args(regress_parser)
    regress_parser.add_argument(
        "--family", choices=REGRESSION_FAMILIES, default=None, help="Environment family"
    )
    regress_parser.set_defaults(func=cmd_regress)

    report_parser = subparsers.add_parser("report", help="Render SVG figures and a summary")
    add_common_args(report_parser)
    report_parser.add_argument(
        "--measure",
        choices=MEASURE_IDS,
        default=None,
        help="Also render the value-pair breakdown of one measure",
    )
    report_parser.set_defaults(func=cmd_report)

    args = parser.parse_args()

    if not hasattr(args, "func"):
        parser.print_help()
        sys.exit(EXIT_OK)

    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(levelname)s %(name)s: %(message)s",
    )

    try:
        args.func(args)
    except ManifestError as e:
        fail(str(e), EXIT_CONFIG)
    except (StoreError, CheckpointError, ReportInputError, IngestionError) as e:
        fail(str(e), EXIT_MALFORMED)
    except KeyboardInterrupt:
        fail("cancelled by user", EXIT_RUNTIME)
    except (ValueError, RuntimeError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        fail(str(e), EXIT_RUNTIME)


if __name__ == "__main__":
    main()
