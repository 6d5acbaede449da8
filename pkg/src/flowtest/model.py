"""Core runtime entities: assertions, tests, suites, outcomes, events, summaries.

Everything here is a plain immutable value except ``StateCell``, the shared
scratch cell the runner hands to reporters. The runner and scheduler build on
these types; reporters and the wire protocol consume their JSON renderings.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Iterator, Optional, Union

#: Human attention thresholds (seconds) that feedback loops must respect.
INSTANTANEOUS = 0.1
FLOW = 1.0
ATTENTION = 10.0


@dataclass(frozen=True)
class LatencyBudget:
    """The three response-time bands feedback loops are measured against."""

    instantaneous: float = INSTANTANEOUS
    flow: float = FLOW
    attention: float = ATTENTION


LATENCY_BUDGET = LatencyBudget()

#: Value-size cap for rendered argument values carried in events/frames.
RENDER_LIMIT = 4096

#: Frame-count cap for backtraces carried in failure contexts.
BACKTRACE_LIMIT = 64


class FlowtestError(Exception):
    """Base class for all errors raised by the framework itself."""


class ValidationError(FlowtestError):
    """A constructor or option set was given inconsistent arguments."""


class InvalidNesting(FlowtestError):
    """A test or suite definition appeared inside a test body."""


class InvalidStructure(FlowtestError):
    """An assertion appeared directly in a suite body, outside any test."""


class ProtocolError(FlowtestError):
    """The runner received a message it does not understand."""


def render_value(value: Any, limit: int = RENDER_LIMIT) -> str:
    """Finite display string for an arbitrary value.

    Rendering must never raise: a hostile ``__repr__`` degrades to a
    placeholder rather than masking the result being rendered.
    """
    try:
        text = repr(value) if isinstance(value, str) else str(value)
    except Exception:
        text = f"<unrenderable {type(value).__name__}>"
    if len(text) > limit:
        text = text[: limit - 1] + "…"
    return text


@dataclass(frozen=True)
class Judgement:
    """Classification of one asserted expression's result value."""

    rendered_value: str
    truthy: bool


def judge(result_value: Any = None) -> Judgement:
    """Classify a result value.

    Only ``False`` and ``None`` (the absent value) are falsy; everything
    else, including ``0`` and ``""``, is truthy. The mapping is total and
    depends on nothing but the value itself.
    """
    truthy = result_value is not False and result_value is not None
    return Judgement(rendered_value=render_value(result_value), truthy=truthy)


@dataclass(frozen=True)
class AssertionSpec:
    """One assertion: captured source text plus deferred computations.

    ``body`` evaluates the asserted expression; ``args`` evaluates the
    argument values of its outermost call (used for failure rendering).
    Each is invoked at most once per execution of the assertion.
    """

    expression_text: str
    body: Callable[[], Any]
    args: Callable[[], list]
    description: Optional[str] = None

    def __post_init__(self) -> None:
        if not self.expression_text:
            raise ValidationError("assertion expression text must be non-empty")


def make_assertion(
    expression_text: str,
    body: Callable[[], Any],
    args: Callable[[], list],
    description: Optional[str] = None,
) -> AssertionSpec:
    """Build an AssertionSpec without executing anything."""
    return AssertionSpec(expression_text, body, args, description)


# Assertion and test outcome kinds. pass/fail/error come from evaluation;
# skip/xfail/xpass arise only from test metadata.
OUTCOME_KINDS = ("pass", "fail", "error", "skip", "xfail", "xpass")


@dataclass(frozen=True)
class Outcome:
    kind: str
    detail: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in OUTCOME_KINDS:
            raise ValidationError(f"unknown outcome kind: {self.kind!r}")
        if self.kind == "error" and not self.detail:
            raise ValidationError("error outcomes must carry a detail message")


PASS = Outcome("pass")
FAIL = Outcome("fail")
SKIP = Outcome("skip")


# Metadata keys honored by the runner. The trailing question marks follow
# the definition forms' surface syntax; values are plain booleans.
META_SKIP = "skip?"
META_EXPECTED_TO_FAIL = "expected-to-fail?"
META_INSPECT = "inspect?"
META_NO_FAILURE = "no-failure?"

ID_SEPARATOR = "/"


def _escape_segment(segment: str) -> str:
    return segment.replace("\\", "\\\\").replace(ID_SEPARATOR, "\\" + ID_SEPARATOR)


def test_id(suite_path: list[str] | tuple[str, ...], description: str) -> str:
    """Stable identity string: suite path joined with the description.

    Separator characters inside segments are backslash-escaped so distinct
    (path, description) pairs never collide.
    """
    if not description:
        raise ValidationError("test description must be non-empty")
    segments = [*suite_path, description]
    return ID_SEPARATOR.join(_escape_segment(s) for s in segments)


def split_test_id(identity: str) -> list[str]:
    """Inverse of :func:`test_id`: recover the escaped segments."""
    segments: list[str] = []
    current: list[str] = []
    chars = iter(identity)
    for ch in chars:
        if ch == "\\":
            current.append(next(chars, ""))
        elif ch == ID_SEPARATOR:
            segments.append("".join(current))
            current = []
        else:
            current.append(ch)
    segments.append("".join(current))
    return segments


@dataclass(frozen=True)
class TestCase:
    """A described group of assertions whose body is deferred."""

    description: str
    body: Callable[[], Any]
    metadata: tuple[tuple[str, Any], ...] = ()
    source_location: Optional[tuple[str, int]] = None
    id: str = ""

    def __post_init__(self) -> None:
        if not self.description:
            raise ValidationError("test description must be non-empty")

    def meta(self, key: str, default: Any = None) -> Any:
        for k, v in self.metadata:
            if k == key:
                return v
        return default

    def with_id(self, suite_path: tuple[str, ...]) -> "TestCase":
        return TestCase(
            description=self.description,
            body=self.body,
            metadata=self.metadata,
            source_location=self.source_location,
            id=test_id(suite_path, self.description),
        )


@dataclass(frozen=True)
class HierarchyNode:
    """Loaded test tree: suites hold children, tests are leaves."""

    kind: str  # "suite" | "test"
    description: str
    metadata: tuple[tuple[str, Any], ...] = ()
    children: tuple["HierarchyNode", ...] = ()
    test: Optional[TestCase] = None

    @staticmethod
    def suite(
        description: str,
        metadata: tuple[tuple[str, Any], ...] = (),
        children: tuple["HierarchyNode", ...] = (),
    ) -> "HierarchyNode":
        return HierarchyNode("suite", description, metadata, children)

    @staticmethod
    def leaf(case: TestCase) -> "HierarchyNode":
        return HierarchyNode("test", case.description, case.metadata, (), case)

    def walk(self, path: tuple[str, ...] = ()) -> Iterator[tuple[tuple[str, ...], TestCase]]:
        """Depth-first (registration-order) traversal of contained tests."""
        if self.kind == "test":
            assert self.test is not None
            yield path, self.test
        else:
            below = path + (self.description,)
            for child in self.children:
                yield from child.walk(below)

    def to_json(self) -> dict:
        if self.kind == "test":
            assert self.test is not None
            node: dict[str, Any] = {
                "kind": "test",
                "description": self.description,
                "metadata": dict(self.metadata),
                "id": self.test.id,
            }
            if self.test.source_location:
                node["source_location"] = list(self.test.source_location)
            return node
        return {
            "kind": "suite",
            "description": self.description,
            "metadata": dict(self.metadata),
            "children": [c.to_json() for c in self.children],
        }

    @staticmethod
    def from_json(data: dict) -> "HierarchyNode":
        if data["kind"] == "test":
            case = TestCase(
                description=data["description"],
                body=_unloadable_body,
                metadata=tuple(data.get("metadata", {}).items()),
                source_location=tuple(data["source_location"]) if data.get("source_location") else None,
                id=data.get("id", ""),
            )
            return HierarchyNode.leaf(case)
        return HierarchyNode.suite(
            data["description"],
            tuple(data.get("metadata", {}).items()),
            tuple(HierarchyNode.from_json(c) for c in data.get("children", [])),
        )


def _unloadable_body() -> None:
    raise FlowtestError("test body is not transferable; run it where it was defined")


@dataclass(frozen=True)
class SuiteNode:
    """A suite value: a callable body augmented with a suite flag.

    Calling the node dispatches its body to the current runner, so a suite
    bound to a name behaves like a plain zero-argument procedure.
    """

    description: str
    body: Callable[[], Any]
    metadata: tuple[tuple[str, Any], ...] = ()
    suite_flag: bool = True

    def __post_init__(self) -> None:
        if not self.description:
            raise ValidationError("suite description must be non-empty")

    def __call__(self, execute: bool = True):
        from .runner import current_runner

        return current_runner().handle(
            {"type": "run-test-suite-body-thunk", "suite": self, "execute?": execute}
        )


def is_suite(value: Any) -> bool:
    return getattr(value, "suite_flag", False) is True


class StateCell:
    """Shared mutable cell with atomic read-modify-write, for reporter scratch state.

    Reporters key their slots by name so combined reporters never clash.
    """

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self._slots: dict[str, Any] = {}

    def get(self, key: str, default: Any = None) -> Any:
        with self._lock:
            return self._slots.get(key, default)

    def put(self, key: str, value: Any) -> None:
        with self._lock:
            self._slots[key] = value

    def update(self, key: str, fn: Callable[[Any], Any], default: Any = None) -> Any:
        with self._lock:
            value = fn(self._slots.get(key, default))
            self._slots[key] = value
            return value


EVENT_TYPES = (
    "suite-enter",
    "suite-leave",
    "test-registered",
    "test-enter",
    "test-leave",
    "assertion-result",
    "run-started",
    "run-finished",
    "nesting-error",
    "failure-context",
    "warning",
)


@dataclass(frozen=True)
class RunEvent:
    """One occurrence emitted by the runner to reporters and the wire."""

    type: str
    payload: dict
    run_id: str
    sequence: int
    state_cell: StateCell

    def to_frame(self) -> dict:
        """Wire rendering: payload fields flattened next to the envelope."""
        frame = {"event": self.type, "run_id": self.run_id, "sequence": self.sequence}
        frame.update(self.payload)
        return frame


@dataclass(frozen=True)
class RunSummary:
    errors: int = 0
    failures: int = 0
    assertions: int = 0
    tests: int = 0

    def __post_init__(self) -> None:
        for name in ("errors", "failures", "assertions", "tests"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} count must be non-negative")
        if self.errors + self.failures > self.assertions:
            raise ValidationError("errors + failures exceed assertion count")

    @property
    def clean(self) -> bool:
        return self.errors == 0 and self.failures == 0

    def to_json(self) -> dict:
        return {
            "errors": self.errors,
            "failures": self.failures,
            "assertions": self.assertions,
            "tests": self.tests,
        }

    @staticmethod
    def from_json(data: dict) -> "RunSummary":
        return RunSummary(
            errors=data["errors"],
            failures=data["failures"],
            assertions=data["assertions"],
            tests=data["tests"],
        )

    def render(self) -> str:
        """Alist-style block used by the verbose reporter's final summary."""
        return (
            f"((errors . {self.errors})\n"
            f" (failures . {self.failures})\n"
            f" (assertions . {self.assertions})\n"
            f" (tests . {self.tests}))"
        )


def summarize_events(events: list[RunEvent] | list[dict]) -> RunSummary:
    """Fold a run's event stream back into its summary counts.

    This is the reference recount: ``assertions`` counts assertion-result
    events, ``tests`` counts test-leave events, ``errors`` counts errored
    assertions, and ``failures`` counts failing assertions belonging to
    tests whose final outcome is fail or xpass (so expected failures do not
    count, and an unexpected pass counts through its synthesized result).
    """
    frames = [e.to_frame() if isinstance(e, RunEvent) else e for e in events]
    assertions = 0
    errors = 0
    tests = 0
    fail_counts: dict[str, int] = {}
    toplevel_fails = 0
    counted_outcomes = {"fail", "xpass"}
    failures = 0
    for frame in frames:
        kind = frame.get("event") or frame.get("type")
        if kind == "assertion-result":
            assertions += 1
            outcome = frame["outcome"]["kind"]
            if outcome == "error":
                errors += 1
            elif outcome == "fail":
                owner = frame.get("test_id")
                if owner is None:
                    toplevel_fails += 1
                else:
                    fail_counts[owner] = fail_counts.get(owner, 0) + 1
        elif kind == "test-leave":
            tests += 1
            if frame["outcome"]["kind"] in counted_outcomes:
                failures += fail_counts.get(frame["test_id"], 0)
    failures += toplevel_fails
    return RunSummary(errors=errors, failures=failures, assertions=assertions, tests=tests)


@dataclass(frozen=True)
class FailureContext:
    """Everything captured at the point of a failing or erroring assertion."""

    test_id: Optional[str]
    expression_text: str
    argument_values: tuple[str, ...]
    backtrace: tuple[tuple[str, str], ...]  # (function name, "file:line")
    outcome: Outcome

    def to_json(self) -> dict:
        return {
            "test_id": self.test_id,
            "expression_text": self.expression_text,
            "argument_values": list(self.argument_values),
            "backtrace": [list(frame) for frame in self.backtrace],
            "outcome": {"kind": self.outcome.kind, "detail": self.outcome.detail},
        }


class CheckFailure(FlowtestError):
    """Failure signal raised under debug-on-failure, carrying its context."""

    def __init__(self, context: FailureContext):
        super().__init__(context.outcome.detail or context.expression_text)
        self.context = context


def hierarchy_to_json_text(forest: list[HierarchyNode]) -> str:
    return json.dumps([node.to_json() for node in forest])


def hierarchy_from_json_text(text: str) -> list[HierarchyNode]:
    return [HierarchyNode.from_json(item) for item in json.loads(text)]


Node = Union[HierarchyNode, TestCase]
