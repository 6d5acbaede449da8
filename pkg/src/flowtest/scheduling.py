"""Turning a loaded hierarchy plus history plus options into runs.

``build_plan`` is pure: flatten, filter, narrow to previous failures when
asked (falling back to the full set when none remain), then order. Ordering
is seeded-random by default, registration order under ``sequential``, and
suite-contiguous under ``preserve_hierarchy``; ``failing_first`` stably
partitions the result with previously failing tests first and never-seen
tests between failing and passing ones.

``execute_plan`` owns the worker pool and the fail-fast short circuit.
"""

from __future__ import annotations

import contextvars
import random
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Optional

from .model import CheckFailure, FlowtestError, HierarchyNode, RunSummary, TestCase, summarize_events
from .runner import RunRecord, Runner, RunnerOptions, bind_context, buffered_events


@dataclass(frozen=True)
class PlanEntry:
    test_id: str
    case: TestCase
    suite_path: tuple[str, ...]


@dataclass(frozen=True)
class RunPlan:
    entries: tuple[PlanEntry, ...]
    options: RunnerOptions
    seed_used: int


def duration_bucket(seconds: float) -> str:
    if seconds < 0.1:
        return "fast"
    if seconds < 1.0:
        return "medium"
    return "slow"


def filter_match(query: Optional[str], record: str) -> bool:
    """Orderless matcher: every whitespace token must appear in the record."""
    if not query:
        return True
    haystack = record.lower()
    return all(token.lower() in haystack for token in query.split())


def test_record(entry: PlanEntry, history: dict[str, RunRecord]) -> str:
    """Stringified test info the filter matches against."""
    module = ""
    if entry.case.source_location:
        module = Path(entry.case.source_location[0]).stem
    parts = [entry.test_id, entry.case.description, module]
    previous = history.get(entry.test_id)
    if previous is not None:
        parts.append(previous.outcome)
        parts.append(duration_bucket(previous.duration))
    return " ".join(p for p in parts if p)


def _flatten(forest: list[HierarchyNode]) -> list[PlanEntry]:
    entries: list[PlanEntry] = []
    for root in forest:
        for path, case in root.walk():
            entries.append(PlanEntry(case.id, case, path))
    return entries


def build_plan(forest: list[HierarchyNode], history: Optional[dict[str, RunRecord]],
               options: RunnerOptions) -> RunPlan:
    history = history or {}
    entries = _flatten(forest)
    entries = [e for e in entries if filter_match(options.filter_query, test_record(e, history))]

    if options.rerun_failed:
        failing = [e for e in entries
                   if (record := history.get(e.test_id)) is not None
                   and record.outcome in ("fail", "error")]
        if failing:
            entries = failing

    seed_used = options.seed if options.seed is not None else time.time_ns() % 2**32
    if not options.sequential and not options.preserve_hierarchy:
        shuffled = list(entries)
        random.Random(seed_used).shuffle(shuffled)
        entries = shuffled

    if options.failing_first:
        def rank(entry: PlanEntry) -> int:
            record = history.get(entry.test_id)
            if record is None:
                return 1
            return 0 if record.outcome in ("fail", "error") else 2

        if options.preserve_hierarchy:
            # Reorder whole root blocks so every suite stays contiguous.
            blocks: dict[str, list[PlanEntry]] = {}
            order: list[str] = []
            for entry in entries:
                root = entry.suite_path[0] if entry.suite_path else entry.test_id
                if root not in blocks:
                    blocks[root] = []
                    order.append(root)
                blocks[root].append(entry)
            order.sort(key=lambda root: min(rank(e) for e in blocks[root]))
            entries = [entry for root in order for entry in blocks[root]]
        else:
            entries = sorted(entries, key=rank)

    return RunPlan(entries=tuple(entries), options=options, seed_used=seed_used)


def _history_view(runner: Runner) -> dict[str, RunRecord]:
    """Latest known record per test: persisted store overlaid with this runner's runs."""
    view: dict[str, RunRecord] = {}
    if runner.history is not None:
        view.update(runner.history.latest)
    view.update(runner.last_run)
    return view


def execute_plan(runner: Runner, plan: RunPlan, run_id: Optional[str] = None,
                 cancel: Any = None) -> RunSummary:
    """Execute a plan's entries, emitting one serialized event stream.

    Fail-fast stops dispatching once a fail or error completes; in-flight
    parallel tests still finish. Under debug-on-failure the first failure
    signal propagates to the caller after the aborted run-finished event.
    """
    run_id = run_id or runner.next_run_id("run")
    options = plan.options
    frames: list[dict] = []

    def collect(event):
        if event.run_id == run_id:
            frames.append(event.to_frame())

    runner.add_tap(collect)
    records: list[RunRecord] = []
    pending_signal: Optional[CheckFailure] = None
    aborted = False
    dispatched = 0
    try:
        runner.emit("run-started", {
            "planned": len(plan.entries),
            "seed": plan.seed_used,
            "options": {
                "sequential": options.sequential,
                "parallel": options.parallel,
                "worker_count": options.worker_count,
                "fail_fast": options.fail_fast,
                "failing_first": options.failing_first,
                "rerun_failed": options.rerun_failed,
                "preserve_hierarchy": options.preserve_hierarchy,
                "filter_query": options.filter_query,
            },
        }, run_id)

        # Tests must observe the dynamic scope of whoever started the run
        # (report sink, user context), even on pool threads.
        scope = contextvars.copy_context()

        def task(entry: PlanEntry):
            def invoke():
                if options.parallel and options.preserve_hierarchy:
                    with buffered_events(runner):
                        return runner.run_test(entry.case, run_id=run_id,
                                               suite_path=entry.suite_path, options=options)
                return runner.run_test(entry.case, run_id=run_id,
                                       suite_path=entry.suite_path, options=options)

            bound = bind_context(invoke, runner)
            context = scope.run(contextvars.copy_context)
            return lambda: context.run(bound)

        if options.parallel:
            stop = False
            index = 0
            pending: dict[Future, PlanEntry] = {}
            with ThreadPoolExecutor(max_workers=options.worker_count) as pool:
                while index < len(plan.entries) or pending:
                    if cancel is not None and cancel.is_set():
                        stop = True
                        aborted = aborted or index < len(plan.entries)
                    while (not stop and index < len(plan.entries)
                           and len(pending) < options.worker_count):
                        entry = plan.entries[index]
                        index += 1
                        dispatched += 1
                        pending[pool.submit(task(entry))] = entry
                    if not pending:
                        break
                    done, _ = wait(pending, return_when=FIRST_COMPLETED)
                    for future in done:
                        pending.pop(future)
                        try:
                            record = future.result()
                        except CheckFailure as signal:
                            if pending_signal is None:
                                pending_signal = signal
                            stop = True
                            aborted = True
                            continue
                        records.append(record)
                        if options.fail_fast and record.outcome in ("fail", "error"):
                            stop = True
        else:
            for entry in plan.entries:
                if cancel is not None and cancel.is_set():
                    aborted = True
                    break
                dispatched += 1
                try:
                    record = task(entry)()
                except CheckFailure as signal:
                    pending_signal = signal
                    aborted = True
                    break
                records.append(record)
                if options.fail_fast and record.outcome in ("fail", "error"):
                    break

        if pending_signal is not None and pending_signal.context.test_id:
            interrupted = runner.last_run.get(pending_signal.context.test_id)
            if interrupted is not None:
                records.append(interrupted)
        summary = summarize_events(frames)
        executed_ids = {r.test_id for r in records}
        not_run = [e.test_id for e in plan.entries if e.test_id not in executed_ids]
        # Persist before announcing completion: a client reacting to
        # run-finished (rerun-failed, daemon restart) must see this run.
        if runner.history is not None and records:
            runner.history.record_run(records)
        runner.emit("run-finished", {
            "summary": summary.to_json(),
            "aborted": aborted,
            "executed": len(plan.entries) - len(not_run),
            "not_run": not_run,
        }, run_id)
    finally:
        runner.remove_tap(collect)

    if pending_signal is not None:
        raise pending_signal
    return summary


def plan_for_runner(runner: Runner, options: Optional[RunnerOptions] = None,
                    roots: Optional[list[str]] = None) -> RunPlan:
    """Build a plan over the runner's loaded forest with its current history."""
    options = options or runner.options
    forest = [n for n in runner.loaded_hierarchy()
              if roots is None or n.description in roots]
    return build_plan(forest, _history_view(runner), options)


def rerun_last(runner: Runner) -> RunSummary:
    """Re-execute the most recent plan's hierarchy and filter with current options."""
    request = getattr(runner, "_last_plan_request", None)
    if request is None:
        raise FlowtestError("nothing to rerun: no plan has been executed by this runner")
    message: dict[str, Any] = {"type": "execute-loaded", "roots": request["roots"]}
    if request["filter_query"] is not None:
        message["filter"] = request["filter_query"]
    return runner.handle(message)
