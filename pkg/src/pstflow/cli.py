"""Command-line front door: validate, run, simulate, bench, report."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .appmanager import RunAborted, RunReport, ValidationFailed, run
from .backends import ResourceRequest
from .bench import REFERENCE, format_rows, median_bench
from .config import ConfigError, RunConfig, load_resources, with_overrides
from .model import AppFileError, load_application, validate_application
from .profiler import ProfileFormatError, UnpairedMarker, compute_overheads, read_profile, report_json

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_FAILED = 3

log = logging.getLogger("pstflow")


def _err(msg: str) -> None:
    print(f"pstflow: {msg}", file=sys.stderr)


def _retries(text: str) -> int | None:
    if text.lower() in ("inf", "unlimited", "none"):
        return None
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("retries must be >= 0, or 'unlimited'")
    return value


def _nonneg(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _positive(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


# -- validate ----------------------------------------------------------------

def cmd_validate(args: argparse.Namespace) -> int:
    try:
        app = load_application(args.app)
    except (OSError, AppFileError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    result = validate_application(app)
    if args.json:
        print(json.dumps({"ok": result.ok, "violations": [
            {"kind": type(v).__name__, "uid": v.uid, "detail": v.detail} for v in result.violations]}))
    elif result.ok:
        n = sum(len(s.tasks) for p in app.pipelines for s in p.stages)
        print(f"{args.app}: ok ({len(app.pipelines)} pipeline(s), {n} task(s))")
    else:
        for v in result.violations:
            _err(f"{args.app}: {v}")
    return EXIT_OK if result.ok else EXIT_INVALID


# -- run / simulate ----------------------------------------------------------

def _build(args: argparse.Namespace, backend: str | None) -> tuple[ResourceRequest, RunConfig]:
    config = RunConfig()
    if args.resources:
        request, overrides = load_resources(args.resources)
        config = with_overrides(config, overrides)
    else:
        request = ResourceRequest(cores=args.cores or 1, backend=backend or "local")
    backend = backend or args.backend or request.backend
    sim = dict(request.backend_config)
    if args.seed is not None:
        sim["seed"] = args.seed
    request = replace(request, backend=backend, backend_config=sim,
                      cores=args.cores if args.cores is not None else request.cores,
                      walltime=args.walltime if args.walltime is not None else request.walltime)
    if args.no_retry:
        config = replace(config, task_retry_limit=0)
    elif args.retries is not ...:
        config = replace(config, task_retry_limit=args.retries)
    if args.rts_restarts is not None:
        config = replace(config, rts_restart_limit=args.rts_restarts)
    app_dir = Path(args.app).resolve().parent
    config = replace(config, base_dir=app_dir, workdir=args.workdir, timeout=args.timeout,
                     profile_path=args.profile)
    return request, config


def _emit(report: RunReport, args: argparse.Namespace) -> None:
    path = Path(args.report) if args.report else Path(report.workdir or ".") / "report.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n")
    if args.json:
        print(report.to_json())
    else:
        print(report.summary())
        print(f"report: {path}")
        if report.profile_path:
            print(f"profile: {report.profile_path}")


def cmd_run(args: argparse.Namespace, backend: str | None = None) -> int:
    try:
        app = load_application(args.app)
        request, config = _build(args, backend)
    except (OSError, AppFileError, ConfigError) as exc:
        _err(str(exc))
        return EXIT_INVALID
    try:
        report = run(app, request, config)
    except ValidationFailed as exc:
        for problem in exc.problems:
            _err(f"{args.app}: {problem}")
        return EXIT_INVALID
    except RunAborted as exc:
        _err(f"run {exc.status.lower()}: {exc}")
        if exc.report is not None:
            _emit(exc.report, args)
        return EXIT_FAILED
    _emit(report, args)
    if not report.ok:
        failed = sorted(report.uids_in("FAILED"))
        if failed:
            _err("failed permanently: " + ", ".join(failed))
        return EXIT_FAILED
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    return cmd_run(args, backend="sim")


# -- bench -------------------------------------------------------------------

def cmd_bench(args: argparse.Namespace) -> int:
    results = []
    for p, c in zip(args.producers, args.consumers):
        _, runs = median_bench(p, c, args.tasks, args.payload_size, args.repetitions)
        runs.sort(key=lambda r: r.total_time)
        results.append(runs[len(runs) // 2])
    if args.json:
        print(json.dumps({"results": [r.to_dict() for r in results], "reference": REFERENCE}, indent=2))
    else:
        print(format_rows(results))
    return EXIT_OK


# -- report ------------------------------------------------------------------

def cmd_report(args: argparse.Namespace) -> int:
    try:
        events = read_profile(args.profile_csv)
    except OSError as exc:
        _err(str(exc))
        return EXIT_INVALID
    except ProfileFormatError as exc:
        _err(f"{args.profile_csv}: {exc}")
        return EXIT_INVALID
    try:
        report = compute_overheads(events)
    except UnpairedMarker as exc:
        _err(f"{args.profile_csv}: {exc}")
        return EXIT_INVALID
    print(report_json(report) if args.json else report.format_table())
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _run_flags(p: argparse.ArgumentParser, backend_flag: bool) -> None:
    p.add_argument("app", help="application description (JSON)")
    p.add_argument("resources", nargs="?", help="resource description (JSON)")
    if backend_flag:
        p.add_argument("--backend", choices=("local", "sim"), default=None)
    p.add_argument("--cores", type=_positive, default=None)
    p.add_argument("--walltime", type=float, default=None, help="minutes")
    p.add_argument("--retries", type=_retries, default=..., metavar="K",
                   help="resubmissions per failed task; 'unlimited' for no cap")
    p.add_argument("--no-retry", action="store_true", help="never resubmit a failed task")
    p.add_argument("--rts-restarts", type=_nonneg, default=None, metavar="R")
    p.add_argument("--seed", type=int, default=None, help="seed for the simulated failure program")
    p.add_argument("--profile", type=Path, default=None, metavar="PATH", help="profile CSV path")
    p.add_argument("--report", type=Path, default=None, metavar="PATH", help="run report JSON path")
    p.add_argument("--workdir", type=Path, default=None)
    p.add_argument("--timeout", type=float, default=None, help="abort after this many seconds")
    p.add_argument("--json", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pstflow", description=__doc__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check an application file")
    p.add_argument("app")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="execute an application")
    _run_flags(p, backend_flag=True)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="execute an application on the simulated backend")
    _run_flags(p, backend_flag=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="producer/consumer throughput over the broker")
    p.add_argument("--producers", type=_positive, nargs="+", default=[1, 2, 4, 8])
    p.add_argument("--consumers", type=_positive, nargs="+", default=None,
                   help="one per --producers entry (default: same as producers)")
    p.add_argument("--tasks", type=_nonneg, default=100_000)
    p.add_argument("--payload-size", type=_nonneg, default=256)
    p.add_argument("--repetitions", type=_positive, default=1)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("report", help="overhead table from a profile CSV")
    p.add_argument("profile_csv")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "bench":
        if args.consumers is None:
            args.consumers = list(args.producers)
        if len(args.consumers) != len(args.producers):
            _err("--consumers needs one value per --producers value")
            return EXIT_INVALID
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
