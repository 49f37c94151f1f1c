"""Command-line entry point wiring measurement and analysis together.

Exit codes: 0 success, 1 benchmark-run failures (failure records were
still written), 2 configuration or usage errors.  Errors go to stderr as
one JSON object per line so scripts can parse them.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import analysis
from .backends import BackendError, open_backend
from .counters import CounterError, Domain
from .harness import HarnessError, environment_check, load_suite, run_suite
from .records import (
    RecordError,
    export_csv,
    iter_records,
    records_from_csv,
    write_records,
)
from .sampler import SessionError

EXIT_OK = 0
EXIT_RUN_FAILURES = 1
EXIT_CONFIG = 2

BACKEND_ENV_VAR = "JOULEMETER_BACKEND"

_CONFIG_ERRORS = (
    HarnessError,
    BackendError,
    SessionError,
    RecordError,
    CounterError,
    analysis.AnalysisError,
)


def _fail(kind: str, message: str) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return EXIT_CONFIG


def _load_any_records(path: str) -> list:
    if path.endswith(".csv"):
        return records_from_csv(path)
    return list(iter_records(path))


def _select_backend(cli_value: str | None, suite_value: str | None) -> str:
    return cli_value or suite_value or os.environ.get(BACKEND_ENV_VAR) or "hardware"


# -- subcommand implementations ---------------------------------------------


def _cmd_run(args: argparse.Namespace) -> int:
    suite = load_suite(args.suite)
    if args.period is not None or args.output is not None:
        import dataclasses

        suite = dataclasses.replace(
            suite,
            period_s=args.period if args.period is not None else suite.period_s,
            output=args.output if args.output is not None else suite.output,
        )
    selector = _select_backend(args.backend, suite.backend)
    output = suite.output or "joulemeter-results.jsonl"
    with open_backend(selector) as backend:
        records = run_suite(
            suite,
            backend,
            backend_name=selector,
            output_path=output,
        )
    failures = [r for r in records if r.error]
    for record in records:
        status = record.error or "ok"
        print(f"{record.record_id}: {status}")
    print(f"{len(records)} record(s) written to {output}; {len(failures)} failure(s)")
    return EXIT_RUN_FAILURES if failures else EXIT_OK


def _cmd_check_env(args: argparse.Namespace) -> int:
    fingerprint = environment_check()
    data = {
        "governor": fingerprint.governor,
        "turbo_enabled": fingerprint.turbo_enabled,
        "frequency_pinned": fingerprint.frequency_pinned,
        "controlled": fingerprint.controlled,
        "cpu_count": fingerprint.cpu_count,
        "machine_id": fingerprint.machine_id,
        "load_1m": fingerprint.load_1m,
        "process_count": fingerprint.process_count,
    }
    if args.json:
        print(json.dumps(data, sort_keys=True))
    else:
        for key, value in data.items():
            print(f"{key}: {'unknown' if value is None else value}")
    return EXIT_OK


def _cmd_export_csv(args: argparse.Namespace) -> int:
    records = list(iter_records(args.log))
    export_csv(records, args.output)
    print(f"{len(records)} record(s) exported to {args.output}")
    return EXIT_OK


def _points_for_power(records) -> list[tuple[float, float]]:
    return [
        (r.avg_cores, r.pkg_watts)
        for r in records
        if r.ok and r.avg_cores is not None and r.pkg_watts is not None
    ]


def _points_for_memory(records) -> list[tuple[float, float]]:
    return [
        (r.memory_activity, r.dram_watts)
        for r in records
        if r.ok and r.memory_activity is not None and r.dram_watts is not None
    ]


def _cmd_fit(args: argparse.Namespace, kind: str) -> int:
    records = _load_any_records(args.data)
    if kind == "power":
        points = _points_for_power(records)
        model = analysis.fit_log_cores(points)
    else:
        points = _points_for_memory(records)
        model = analysis.fit_linear_memory(points)
    print(analysis.render_model(model))
    if kind == "power":
        print(f"doubling increment: {analysis.power_doubling_increment(model):.6g} W")
        print(
            "break-even throughput gain at 1 core: "
            f"{analysis.breakeven_throughput_gain(model, 1.0):.6g}"
        )
    if args.output:
        Path(args.output).write_text(json.dumps(model.to_dict(), sort_keys=True) + "\n")
        print(f"model written to {args.output}")
    if args.plot:
        analysis.plot_model(points, model, args.plot)
        print(f"plot written to {args.plot}")
    return EXIT_OK


def _cmd_normalize(args: argparse.Namespace) -> int:
    records = _load_any_records(args.data)
    table = analysis.normalize(
        records,
        args.baseline,
        energy_domain=Domain(args.energy_domain),
        aggregate="arithmetic" if args.arithmetic_mean else "geometric",
    )
    print(analysis.render_table(table))
    return EXIT_OK


def _cmd_confounds(args: argparse.Namespace) -> int:
    records = _load_any_records(args.data)
    thresholds = analysis.ConfoundThresholds(
        parallelism_ratio=args.parallelism_threshold,
        power_band_w=args.power_band,
        warmup_ratio=args.warmup_threshold,
    )
    report = analysis.detect_confounds(records, thresholds)
    print(analysis.render_confound_report(report))
    return EXIT_OK


def _load_model(path: str) -> analysis.PowerModel:
    return analysis.PowerModel.from_dict(json.loads(Path(path).read_text()))


def _cmd_predict(args: argparse.Namespace) -> int:
    if args.pkg_model is None and args.dram_model is None:
        return _fail("usage", "predict needs --pkg-model and/or --dram-model")
    workload = analysis.WorkloadDescriptor(
        avg_active_cores=args.cores,
        memory_activity=args.misses,
        duration_s=args.duration,
    )
    if args.pkg_model:
        prediction = analysis.predict_power(_load_model(args.pkg_model), workload)
        print(f"pkg: {prediction.watts:.6g} W, {prediction.joules:.6g} J")
    if args.dram_model:
        prediction = analysis.predict_power(_load_model(args.dram_model), workload)
        print(f"dram: {prediction.watts:.6g} W, {prediction.joules:.6g} J")
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="joulemeter",
        description=(
            "Measure program energy with overflow-safe RAPL accounting and "
            "analyze the results with power models and confound checks."
        ),
    )
    parser.add_argument(
        "-v", "--verbose", action="count", default=0, help="increase log verbosity"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a benchmark suite")
    run.add_argument("suite", help="suite config file (YAML)")
    run.add_argument(
        "--backend",
        help=f"'hardware' or 'simulated:<trajectory-file>' (default from suite or ${BACKEND_ENV_VAR})",
    )
    run.add_argument("--period", type=float, help="sampling period in seconds")
    run.add_argument("--output", help="results log path (JSON lines, appended)")

    check = sub.add_parser("check-env", help="report measurement-relevant machine state")
    check.add_argument("--json", action="store_true", help="machine-readable output")

    export = sub.add_parser("export-csv", help="export a results log to CSV")
    export.add_argument("log", help="results log (JSON lines)")
    export.add_argument("--output", default="joulemeter-results.csv")

    for name, help_text in (
        ("fit-power", "fit PKG watts vs log2(average active cores)"),
        ("fit-memory", "fit DRAM watts vs LLC misses per second"),
    ):
        fit = sub.add_parser(name, help=help_text)
        fit.add_argument("data", help="results log (.jsonl) or CSV export (.csv)")
        fit.add_argument("--output", help="write fitted model JSON here")
        fit.add_argument("--plot", help="write a scatter+fit plot here (PNG)")

    norm = sub.add_parser("normalize", help="normalized time/energy table")
    norm.add_argument("data", help="results log (.jsonl) or CSV export (.csv)")
    norm.add_argument("--baseline", required=True, help="baseline language_impl")
    norm.add_argument(
        "--energy-domain", choices=["pkg", "dram"], default="pkg",
        help="which energy domain to normalize (never summed)",
    )
    norm.add_argument(
        "--arithmetic-mean", action="store_true",
        help="aggregate with the arithmetic instead of geometric mean",
    )

    conf = sub.add_parser("confounds", help="flag unfair comparisons in a result set")
    conf.add_argument("data", help="results log (.jsonl) or CSV export (.csv)")
    conf.add_argument("--parallelism-threshold", type=float, default=2.0)
    conf.add_argument("--power-band", type=float, default=0.5)
    conf.add_argument("--warmup-threshold", type=float, default=1.2)

    predict = sub.add_parser("predict", help="predict power/energy for a workload")
    predict.add_argument("--cores", type=float, required=True)
    predict.add_argument("--misses", type=float, default=0.0, help="LLC misses per second")
    predict.add_argument("--duration", type=float, required=True, help="seconds")
    predict.add_argument("--pkg-model", help="fitted log-cores model JSON")
    predict.add_argument("--dram-model", help="fitted linear-memory model JSON")

    return parser


_HANDLERS = {
    "run": _cmd_run,
    "check-env": _cmd_check_env,
    "export-csv": _cmd_export_csv,
    "fit-power": lambda args: _cmd_fit(args, "power"),
    "fit-memory": lambda args: _cmd_fit(args, "memory"),
    "normalize": _cmd_normalize,
    "confounds": _cmd_confounds,
    "predict": _cmd_predict,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return _HANDLERS[args.command](args)
    except _CONFIG_ERRORS as exc:
        return _fail(type(exc).__name__, str(exc))
    except FileNotFoundError as exc:
        return _fail("FileNotFoundError", str(exc))
    except (json.JSONDecodeError, ValueError) as exc:
        return _fail(type(exc).__name__, str(exc))


if __name__ == "__main__":
    sys.exit(main())
