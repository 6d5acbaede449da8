"""The stateful, message-driven test runner.

A runner is a long-lived object driven entirely by messages: definition
forms send their deferred bodies here, and the runner decides whether to
register or execute them. It enforces the nesting rules (tests may not
contain tests or suites; suites may not directly contain assertions),
builds the loaded hierarchy, executes assertions under error capture, and
pushes every occurrence to its reporter as a :class:`~flowtest.model.RunEvent`.

The ambient current runner is dynamically scoped: ``with_runner`` installs
one for the extent of a callable and restores the previous one afterwards,
even on error. A process-wide default runner is created on first use.
"""

from __future__ import annotations

import itertools
import sys
import threading
import time
import traceback
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass, field, fields, replace
from typing import Any, Callable, Optional

from .capture import infer_operator, mismatch_detail
from .model import (
    BACKTRACE_LIMIT,
    AssertionSpec,
    CheckFailure,
    FailureContext,
    HierarchyNode,
    InvalidNesting,
    InvalidStructure,
    META_EXPECTED_TO_FAIL,
    META_INSPECT,
    META_NO_FAILURE,
    META_SKIP,
    Outcome,
    ProtocolError,
    RunEvent,
    StateCell,
    SuiteNode,
    TestCase,
    ValidationError,
    judge,
    render_value,
    test_id as make_test_id,
)


@dataclass(frozen=True)
class RunnerOptions:
    """Execution options; a consistent set is validated at construction.

    ``sequential`` and ``parallel`` are mutually exclusive; with neither
    set, tests run in seeded random order.
    """

    preserve_hierarchy: bool = False
    sequential: bool = False
    parallel: bool = False
    worker_count: int = 4
    fail_fast: bool = False
    failing_first: bool = False
    debug_on_failure: bool = False
    rerun_failed: bool = False
    capture_failure_context: bool = False
    filter_query: Optional[str] = None
    seed: Optional[int] = None

    def __post_init__(self) -> None:
        if self.sequential and self.parallel:
            raise ValidationError("sequential and parallel runs are mutually exclusive")
        if self.worker_count < 1:
            raise ValidationError("worker_count must be a positive integer")

    def merged(self, **overrides: Any) -> "RunnerOptions":
        known = {f.name for f in fields(self)}
        unknown = set(overrides) - known
        if unknown:
            raise ValidationError(f"unknown runner options: {sorted(unknown)}")
        return replace(self, **overrides)


@dataclass(frozen=True)
class RunRecord:
    """Outcome and duration of one test execution."""

    test_id: str
    outcome: str
    duration: float
    run_id: str
    finished_at: float


class _SuiteLoad:
    """Mutable bookkeeping for one suite body being loaded."""

    __slots__ = ("suite", "path", "children", "run_id", "seen_ids")

    def __init__(self, suite: SuiteNode, path: tuple[str, ...], run_id: str, seen_ids: set):
        self.suite = suite
        self.path = path
        self.children: list[HierarchyNode] = []
        self.run_id = run_id
        self.seen_ids = seen_ids


class _Tally:
    """Per-test assertion counts and the metadata flags that shape them."""

    __slots__ = ("case", "run_id", "options", "passes", "fails", "errors", "first_detail",
                 "inspect", "coerce", "expected_to_fail")

    def __init__(self, case: TestCase, run_id: str, options: "RunnerOptions"):
        self.case = case
        self.run_id = run_id
        self.options = options
        self.passes = 0
        self.fails = 0
        self.errors = 0
        self.first_detail: Optional[str] = None
        self.inspect = bool(case.meta(META_INSPECT))
        self.coerce = self.inspect and bool(case.meta(META_NO_FAILURE))
        self.expected_to_fail = bool(case.meta(META_EXPECTED_TO_FAIL))

    def record(self, kind: str, detail: Optional[str]) -> None:
        if kind == "pass":
            self.passes += 1
        elif kind == "fail":
            self.fails += 1
        else:
            self.errors += 1
        if kind != "pass" and self.first_detail is None:
            self.first_detail = detail


@dataclass
class _Frame:
    runner: "Runner"
    kind: str  # "suite" | "test"
    load: Optional[_SuiteLoad] = None
    tally: Optional[_Tally] = None


_STACK: ContextVar[tuple[_Frame, ...]] = ContextVar("flowtest_exec_stack", default=())
_CURRENT: ContextVar[Optional["Runner"]] = ContextVar("flowtest_current_runner", default=None)

_MESSAGE_TYPES = (
    "run-test-suite-body-thunk",
    "run-test-body-thunk",
    "run-assertion",
    "set-options",
    "get-hierarchy",
    "execute-loaded",
    "rerun-failed",
)


class _EventBuffer:
    """Holds one test's events so parallel execution can flush them contiguously."""

    __slots__ = ("runner", "events")

    def __init__(self, runner: "Runner"):
        self.runner = runner
        self.events: list[tuple[str, dict, str]] = []


_EMIT_BUFFER: ContextVar[Optional[_EventBuffer]] = ContextVar("flowtest_emit_buffer", default=None)


class Runner:
    """Stateful runner: registers, defers, executes, and reports.

    The only interaction surface is :meth:`handle`; a runner is itself
    callable with a message for parity with the definition forms.
    """

    def __init__(self, reporter: Optional[Callable] = None, options: Optional[RunnerOptions] = None,
                 history: Any = None):
        if reporter is None:
            from .reporting import base_reporter

            reporter = base_reporter()
        self.reporter = reporter
        self.options = options or RunnerOptions()
        self.history = history
        self.state_cell = StateCell()
        self.last_run: dict[str, RunRecord] = {}
        self._loaded: list[HierarchyNode] = []
        self._lock = threading.RLock()
        self._sequences: dict[str, int] = {}
        self._counter = itertools.count(1)
        self._taps: list[Callable[[RunEvent], None]] = []
        self._last_plan_request: Optional[dict] = None

    # -- event plumbing -----------------------------------------------------

    def next_run_id(self, prefix: str = "run") -> str:
        return f"{prefix}-{next(self._counter)}"

    def add_tap(self, tap: Callable[[RunEvent], None]) -> None:
        with self._lock:
            self._taps.append(tap)

    def remove_tap(self, tap: Callable[[RunEvent], None]) -> None:
        with self._lock:
            if tap in self._taps:
                self._taps.remove(tap)

    def emit(self, type: str, payload: dict, run_id: str) -> None:
        buffer = _EMIT_BUFFER.get()
        if buffer is not None and buffer.runner is self:
            buffer.events.append((type, payload, run_id))
            return
        self._dispatch(type, payload, run_id)

    def flush_buffer(self, buffer: _EventBuffer) -> None:
        """Emit a buffered test's events back-to-back under one lock hold."""
        with self._lock:
            for type, payload, run_id in buffer.events:
                self._dispatch(type, payload, run_id)
        buffer.events.clear()

    def _dispatch(self, type: str, payload: dict, run_id: str) -> None:
        with self._lock:
            sequence = self._sequences.get(run_id, 0)
            self._sequences[run_id] = sequence + 1
            event = RunEvent(type=type, payload=payload, run_id=run_id,
                             sequence=sequence, state_cell=self.state_cell)
            try:
                self.reporter(event)
            except Exception:  # a broken reporter must not damage the run
                traceback.print_exc(file=sys.stderr)
            for tap in self._taps:
                tap(event)

    # -- context ------------------------------------------------------------

    def _top_frame(self) -> Optional[_Frame]:
        for frame in reversed(_STACK.get()):
            if frame.runner is self:
                return frame
        return None

    @contextmanager
    def _pushed(self, frame: _Frame):
        token = _STACK.set(_STACK.get() + (frame,))
        try:
            yield
        finally:
            _STACK.reset(token)

    # -- message handling ---------------------------------------------------

    def handle(self, message: dict) -> Any:
        if not isinstance(message, dict) or "type" not in message:
            raise ProtocolError("runner messages are dicts with a 'type' key")
        kind = message["type"]
        if kind not in _MESSAGE_TYPES:
            raise ProtocolError(f"unknown runner message type: {kind!r}")
        if kind == "run-test-suite-body-thunk":
            return self._load_suite(message["suite"], execute=message.get("execute?", True))
        if kind == "run-test-body-thunk":
            return self._receive_test(message["test"])
        if kind == "run-assertion":
            return self.run_assertion(message["spec"])
        if kind == "set-options":
            opts = message["options"]
            self.options = opts if isinstance(opts, RunnerOptions) else self.options.merged(**opts)
            return self.options
        if kind == "get-hierarchy":
            return self.loaded_hierarchy()
        if kind == "execute-loaded":
            return self._execute_loaded(message)
        if kind == "rerun-failed":
            merged = dict(message)
            merged["options"] = {**message.get("options", {}), "rerun_failed": True}
            merged["type"] = "execute-loaded"
            return self._execute_loaded(merged)
        raise AssertionError("unreachable")

    __call__ = handle

    # -- loading ------------------------------------------------------------

    def _load_suite(self, suite: SuiteNode, execute: bool) -> Any:
        frame = self._top_frame()
        if frame is not None and frame.kind == "test":
            self.emit(
                "nesting-error",
                {"violation": "suite-in-test", "description": suite.description},
                frame.tally.run_id if frame.tally else self.next_run_id("adhoc"),
            )
            raise InvalidNesting(
                f"test suite {suite.description!r} defined inside a test body"
            )
        parent = frame.load if frame is not None else None
        if parent is not None:
            path = parent.path + (suite.description,)
            run_id = parent.run_id
            seen = parent.seen_ids
        else:
            path = (suite.description,)
            run_id = self.next_run_id("load")
            seen = set()
        load = _SuiteLoad(suite, path, run_id, seen)
        depth = len(path) - 1
        self.emit("suite-enter", {"description": suite.description, "depth": depth,
                                  "phase": "load"}, run_id)
        try:
            with self._pushed(_Frame(self, "suite", load=load)):
                suite.body()
        finally:
            self.emit("suite-leave", {"description": suite.description, "depth": depth,
                                      "phase": "load"}, run_id)
        node = HierarchyNode.suite(suite.description, suite.metadata, tuple(load.children))
        if parent is not None:
            parent.children.append(node)
            return node
        with self._lock:
            self._loaded = [n for n in self._loaded if n.description != node.description]
            self._loaded.append(node)
        if execute:
            return self._execute_loaded({"roots": [node.description]})
        return node

    def _receive_test(self, case: TestCase) -> Any:
        frame = self._top_frame()
        if frame is not None and frame.kind == "test":
            self.emit(
                "nesting-error",
                {"violation": "test-in-test", "description": case.description},
                frame.tally.run_id if frame.tally else self.next_run_id("adhoc"),
            )
            raise InvalidNesting(f"test {case.description!r} defined inside a test body")
        if frame is not None and frame.kind == "suite":
            load = frame.load
            assert load is not None
            placed = case.with_id(load.path)
            if placed.id in load.seen_ids:
                self.emit("warning", {"message": f"duplicate test id {placed.id!r}; running both",
                                      "test_id": placed.id}, load.run_id)
            load.seen_ids.add(placed.id)
            load.children.append(HierarchyNode.leaf(placed))
            self.emit("test-registered", {"test_id": placed.id, "description": placed.description,
                                          "depth": len(load.path)}, load.run_id)
            return None
        # Standalone test at top level: execute immediately, return nothing.
        self.run_test(case.with_id(()), run_id=self.next_run_id("adhoc"))
        return None

    def loaded_hierarchy(self) -> list[HierarchyNode]:
        """Structural snapshot of the loaded forest (values are immutable)."""
        with self._lock:
            return list(self._loaded)

    # -- execution ----------------------------------------------------------

    def _execute_loaded(self, message: dict):
        from .scheduling import _history_view, build_plan, execute_plan

        options = self.options
        if message.get("options"):
            opts = message["options"]
            options = opts if isinstance(opts, RunnerOptions) else options.merged(**opts)
        if message.get("filter") is not None:
            options = options.merged(filter_query=message["filter"])
        roots = message.get("roots")
        with self._lock:
            forest = [n for n in self._loaded if roots is None or n.description in roots]
            self._last_plan_request = {"roots": roots, "filter_query": options.filter_query}
        plan = build_plan(forest, _history_view(self), options)
        return execute_plan(self, plan, run_id=message.get("run_id"),
                            cancel=message.get("cancel"))

    def run_assertion(self, spec: AssertionSpec) -> Any:
        frame = self._top_frame()
        if frame is not None and frame.kind == "suite":
            self.emit("nesting-error",
                      {"violation": "assertion-in-suite", "expression": spec.expression_text},
                      frame.load.run_id if frame.load else self.next_run_id("adhoc"))
            raise InvalidStructure(
                f"assertion {spec.expression_text!r} directly inside a suite body; wrap it in a test"
            )
        tally = frame.tally if frame is not None else None
        run_id = tally.run_id if tally is not None else self.next_run_id("adhoc")
        owner = tally.case.id if tally is not None else None
        options = tally.options if tally is not None else self.options

        started = time.perf_counter()
        raised: Optional[BaseException] = None
        result: Any = None
        try:
            result = spec.body()
        except Exception as exc:
            raised = exc
        duration = time.perf_counter() - started

        if raised is None:
            judgement = judge(result)
            kind = "pass" if judgement.truthy else "fail"
            rendered = judgement.rendered_value
        else:
            kind = "error"
            rendered = f"{type(raised).__name__}: {raised}"

        coerced = False
        if tally is not None and tally.coerce and kind == "fail":
            kind = "pass"
            coerced = True

        argument_values: list[str] = []
        detail: Optional[str] = None
        if kind == "fail":
            try:
                argument_values = [render_value(v) for v in spec.args()]
            except Exception:
                argument_values = ["<unavailable>"]
            detail = mismatch_detail(infer_operator(spec.expression_text), argument_values, rendered)
        elif kind == "error":
            try:
                argument_values = [render_value(v) for v in spec.args()]
            except Exception:
                argument_values = ["<unavailable>"]
            detail = rendered

        payload: dict[str, Any] = {
            "test_id": owner,
            "expression_text": spec.expression_text,
            "outcome": {"kind": kind, "detail": detail},
            "duration_s": duration,
        }
        if spec.description:
            payload["description"] = spec.description
        if kind in ("fail", "error"):
            payload["argument_values"] = argument_values
        if (tally is not None and tally.inspect) or coerced:
            payload["value"] = rendered
        self.emit("assertion-result", payload, run_id)

        if tally is not None:
            tally.record(kind, detail)

        wants_context = options.debug_on_failure or options.capture_failure_context
        expected = tally is not None and tally.expected_to_fail
        if kind in ("fail", "error") and wants_context and not expected:
            context = FailureContext(
                test_id=owner,
                expression_text=spec.expression_text,
                argument_values=tuple(argument_values),
                backtrace=self._backtrace(raised),
                outcome=Outcome(kind, detail),
            )
            self.emit("failure-context", context.to_json(), run_id)
            if options.debug_on_failure and tally is not None:
                raise CheckFailure(context)

        if tally is None:  # top level: transparent result
            if raised is not None:
                raise raised
            return result
        return result

    @staticmethod
    def _backtrace(raised: Optional[BaseException]) -> tuple[tuple[str, str], ...]:
        if raised is not None and raised.__traceback__ is not None:
            stack = traceback.extract_tb(raised.__traceback__, limit=BACKTRACE_LIMIT)
        else:
            stack = traceback.extract_stack(limit=BACKTRACE_LIMIT)[:-2]
        return tuple((f.name, f"{f.filename}:{f.lineno}") for f in stack[-BACKTRACE_LIMIT:])

    def run_test(self, case: TestCase, *, run_id: str, suite_path: tuple[str, ...] = (),
                 options: Optional[RunnerOptions] = None) -> RunRecord:
        options = options or self.options
        self.emit("test-enter", {"test_id": case.id, "description": case.description,
                                 "suite_path": list(suite_path)}, run_id)
        started = time.perf_counter()
        if case.meta(META_SKIP):
            outcome = Outcome("skip", render_value(case.meta(META_SKIP)) if isinstance(case.meta(META_SKIP), str) else None)
            return self._finish_test(case, run_id, outcome, time.perf_counter() - started)

        tally = _Tally(case, run_id, options)
        pending_signal: Optional[CheckFailure] = None
        try:
            with self._pushed(_Frame(self, "test", tally=tally)):
                case.body()
        except CheckFailure as signal:
            pending_signal = signal
        except (InvalidNesting, InvalidStructure) as violation:
            # Malformed definitions are framework errors, not test outcomes:
            # close the test's event bracket, then let the error propagate.
            self._finish_test(case, run_id, Outcome("error", str(violation)),
                              time.perf_counter() - started)
            raise
        except Exception as exc:
            detail = f"{type(exc).__name__}: {exc}"
            self.emit("assertion-result", {
                "test_id": case.id,
                "expression_text": "<test body>",
                "outcome": {"kind": "error", "detail": detail},
                "duration_s": 0.0,
                "argument_values": [],
            }, run_id)
            tally.record("error", detail)
            if (options.debug_on_failure or options.capture_failure_context) and not tally.expected_to_fail:
                context = FailureContext(case.id, "<test body>", (), self._backtrace(exc),
                                         Outcome("error", detail))
                self.emit("failure-context", context.to_json(), run_id)
                if options.debug_on_failure:
                    pending_signal = CheckFailure(context)

        if tally.errors:
            outcome = Outcome("error", tally.first_detail or "error")
        elif tally.fails:
            outcome = Outcome("fail", tally.first_detail)
        else:
            outcome = Outcome("pass")

        if tally.expected_to_fail and outcome.kind in ("pass", "fail"):
            if outcome.kind == "fail":
                outcome = Outcome("xfail", outcome.detail)
            else:
                detail = "test passed but was expected to fail"
                self.emit("assertion-result", {
                    "test_id": case.id,
                    "expression_text": "<expected failure>",
                    "outcome": {"kind": "fail", "detail": detail},
                    "duration_s": 0.0,
                    "argument_values": [],
                }, run_id)
                outcome = Outcome("xpass", detail)

        record = self._finish_test(case, run_id, outcome, time.perf_counter() - started)
        if pending_signal is not None:
            raise pending_signal
        return record

    def _finish_test(self, case: TestCase, run_id: str, outcome: Outcome, duration: float) -> RunRecord:
        self.emit("test-leave", {
            "test_id": case.id,
            "description": case.description,
            "outcome": {"kind": outcome.kind, "detail": outcome.detail},
            "duration_s": duration,
        }, run_id)
        record = RunRecord(test_id=case.id, outcome=outcome.kind, duration=duration,
                           run_id=run_id, finished_at=time.time())
        with self._lock:
            self.last_run[case.id] = record
        return record


# -- ambient current runner ----------------------------------------------

_default_runner: Optional[Runner] = None
_default_lock = threading.Lock()


def default_runner() -> Runner:
    """The process-wide default runner, created on first use."""
    global _default_runner
    with _default_lock:
        if _default_runner is None:
            _default_runner = Runner()
        return _default_runner


def set_default_runner(runner: Runner) -> None:
    global _default_runner
    with _default_lock:
        _default_runner = runner


def current_runner() -> Runner:
    return _CURRENT.get() or default_runner()


def with_runner(runner: Runner, thunk: Callable[[], Any]) -> Any:
    """Run ``thunk`` with ``runner`` as the ambient current runner.

    Restores the previous runner afterwards, even when ``thunk`` raises;
    nesting is re-entrant.
    """
    token = _CURRENT.set(runner)
    try:
        return thunk()
    finally:
        _CURRENT.reset(token)


@contextmanager
def use_runner(runner: Runner):
    """Context-manager form of :func:`with_runner`."""
    token = _CURRENT.set(runner)
    try:
        yield runner
    finally:
        _CURRENT.reset(token)


def make_runner(reporter: Optional[Callable] = None, options: Optional[RunnerOptions] = None,
                history: Any = None) -> Runner:
    """Fresh runner with an empty loaded forest and empty run history."""
    return Runner(reporter=reporter, options=options, history=history)


def bind_context(fn: Callable[[], Any], runner: Runner) -> Callable[[], Any]:
    """Wrap ``fn`` so it executes with ``runner`` current and a clean stack.

    Worker threads do not inherit the dispatching context, so plan
    executors use this to rebind before invoking test bodies.
    """

    def bound() -> Any:
        stack_token = _STACK.set(())
        runner_token = _CURRENT.set(runner)
        try:
            return fn()
        finally:
            _CURRENT.reset(runner_token)
            _STACK.reset(stack_token)

    return bound


def buffered_events(runner: Runner) -> "_BufferHandle":
    """Collect this context's emissions for a later contiguous flush."""
    return _BufferHandle(runner)


class _BufferHandle:
    def __init__(self, runner: Runner):
        self.runner = runner
        self.buffer = _EventBuffer(runner)
        self._token = None

    def __enter__(self) -> _EventBuffer:
        self._token = _EMIT_BUFFER.set(self.buffer)
        return self.buffer

    def __exit__(self, *exc) -> None:
        _EMIT_BUFFER.reset(self._token)
        self.runner.flush_buffer(self.buffer)
