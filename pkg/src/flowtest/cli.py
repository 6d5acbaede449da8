"""Command-line entry point: batch runs, listing, discovery, and the daemon.

Exit codes follow the usual automation contract: 0 when a run finishes with
no failures or errors, 1 when tests failed, 2 for usage or environment
problems.
"""

from __future__ import annotations

import argparse
import os
import sys
import traceback
from pathlib import Path

from .daemon import serve
from .discovery import SuiteRegistry, get_all_test_modules, load_project_suites
from .history import project_store
from .model import CheckFailure, FlowtestError, ValidationError
from .reporting import emit_junit, emit_tap, named_reporter
from .runner import Runner, RunnerOptions
from .scheduling import _history_view, filter_match, test_record, PlanEntry

REPORTER_CHOICES = ("base", "verbose", "dots", "silent", "hierarchy")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowtest",
                                     description="runtime-first interactive test runner")
    commands = parser.add_subparsers(dest="command", required=True)

    def add_root(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--root", default=None,
                         help="project root (default: $FLOWTEST_ROOT or .)")

    def add_run_flags(sub: argparse.ArgumentParser) -> None:
        add_root(sub)
        sub.add_argument("--filter", default=None, metavar="QUERY",
                         help="orderless filter over stringified test info")
        sub.add_argument("--fail-fast", action="store_true",
                         help="stop scheduling after the first failure")
        sub.add_argument("--failing-first", action="store_true",
                         help="run previously failing tests first")
        sub.add_argument("--rerun-failed", action="store_true",
                         help="run only previously failing tests (all, when none)")
        sub.add_argument("--sequential", action="store_true",
                         help="run in registration order")
        sub.add_argument("--parallel", nargs="?", const=0, type=int, default=None,
                         metavar="N", help="run on N workers (default: CPU count)")
        sub.add_argument("--seed", type=int, default=None,
                         help="seed for the default shuffled order")
        sub.add_argument("--preserve-hierarchy", action="store_true",
                         help="keep each suite's tests contiguous, in registration order")
        sub.add_argument("--debug-on-failure", action="store_true",
                         help="raise the failure signal with its captured context")
        sub.add_argument("--reporter", choices=REPORTER_CHOICES, default="base")
        sub.add_argument("--tap", default=None, metavar="PATH", help="write a TAP-14 report")
        sub.add_argument("--junit", default=None, metavar="PATH", help="write a JUnit XML report")

    add_run_flags(commands.add_parser("run", help="discover, plan, and execute tests"))
    add_run_flags(commands.add_parser("rerun-failed",
                                      help="run with previously failing tests selected"))

    list_cmd = commands.add_parser("list", help="list discovered tests")
    add_root(list_cmd)
    list_cmd.add_argument("--filter", default=None, metavar="QUERY")

    add_root(commands.add_parser("discover", help="list discovered test modules"))

    daemon_cmd = commands.add_parser("daemon", help="serve the runner over the wire protocol")
    add_root(daemon_cmd)
    daemon_cmd.add_argument("--port", type=int, default=None,
                            help="TCP port (default: $FLOWTEST_PORT or 0 = ephemeral)")
    daemon_cmd.add_argument("--ui-dir", default=None,
                            help="directory of built dashboard assets to serve at /")
    return parser


def _project_root(args: argparse.Namespace) -> Path:
    return Path(args.root or os.environ.get("FLOWTEST_ROOT") or ".")


def _options_from(args: argparse.Namespace) -> RunnerOptions:
    parallel = args.parallel is not None
    workers = args.parallel if parallel and args.parallel else (os.cpu_count() or 4)
    return RunnerOptions(
        preserve_hierarchy=args.preserve_hierarchy,
        sequential=args.sequential,
        parallel=parallel,
        worker_count=workers,
        fail_fast=args.fail_fast,
        failing_first=args.failing_first,
        debug_on_failure=args.debug_on_failure,
        rerun_failed=args.rerun_failed or args.command == "rerun-failed",
        filter_query=args.filter,
        seed=args.seed,
    )


def _command_run(args: argparse.Namespace) -> int:
    try:
        options = _options_from(args)
    except ValidationError as exc:
        print(f"flowtest: {exc}", file=sys.stderr)
        return 2

    root = _project_root(args)
    runner = Runner(reporter=named_reporter(args.reporter), options=options,
                    history=project_store(root))
    try:
        load_project_suites(runner, root, registry=SuiteRegistry())
    except FlowtestError as exc:
        print(f"flowtest: discovery failed: {exc}", file=sys.stderr)
        return 2

    frames: list[dict] = []
    if args.tap or args.junit:
        runner.add_tap(lambda event: frames.append(event.to_frame()))

    try:
        summary = runner.handle({"type": "execute-loaded"})
    except CheckFailure as signal:
        context = signal.context
        print(f"\nfailure in {context.test_id}: {context.expression_text}", file=sys.stderr)
        for name, location in context.backtrace[-10:]:
            print(f"  {name} at {location}", file=sys.stderr)
        _write_reports(args, frames)
        return 1

    _write_reports(args, frames)
    return 0 if summary.clean else 1


def _write_reports(args: argparse.Namespace, frames: list[dict]) -> None:
    run_frames = [f for f in frames if str(f.get("run_id", "")).startswith("run-")]
    if args.tap:
        Path(args.tap).write_text(emit_tap(run_frames), encoding="utf-8")
    if args.junit:
        Path(args.junit).write_text(emit_junit(run_frames), encoding="utf-8")


def _command_list(args: argparse.Namespace) -> int:
    root = _project_root(args)
    runner = Runner(reporter=lambda event: True, history=project_store(root))
    try:
        load_project_suites(runner, root, registry=SuiteRegistry())
    except FlowtestError as exc:
        print(f"flowtest: discovery failed: {exc}", file=sys.stderr)
        return 2
    history = _history_view(runner)
    for node in runner.loaded_hierarchy():
        for path, case in node.walk():
            entry = PlanEntry(case.id, case, path)
            if not filter_match(args.filter, test_record(entry, history)):
                continue
            record = history.get(case.id)
            suffix = f"  [{record.outcome} {record.duration:.3f}s]" if record else ""
            print(case.id + suffix)
    return 0


def _command_discover(args: argparse.Namespace) -> int:
    try:
        modules = get_all_test_modules(_project_root(args))
    except FlowtestError as exc:
        print(f"flowtest: {exc}", file=sys.stderr)
        return 2
    for module in modules:
        print(str(module))
    return 0


def _command_daemon(args: argparse.Namespace) -> int:
    root = _project_root(args)
    port = args.port if args.port is not None else int(os.environ.get("FLOWTEST_PORT", "0"))
    runner = Runner(reporter=lambda event: True, history=project_store(root))
    try:
        serve(("127.0.0.1", port), runner, project_root=root, ui_dir=args.ui_dir)
    except FlowtestError as exc:
        print(f"flowtest: {exc}", file=sys.stderr)
        return 2
    return 0


def main(argv: "list[str] | None" = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2

    try:
        if args.command in ("run", "rerun-failed"):
            return _command_run(args)
        if args.command == "list":
            return _command_list(args)
        if args.command == "discover":
            return _command_discover(args)
        if args.command == "daemon":
            return _command_daemon(args)
    except KeyboardInterrupt:
        return 130
    except Exception:
        traceback.print_exc()
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
