"""User-facing definition forms: ``check``, ``test``, ``suite``, ``suite_thunk``.

These are thin wrappers that package deferred bodies into runtime values
and send them to the ambient current runner; all execution policy lives in
the runner. ``test`` and ``suite`` act at definition time (registering
inside a suite body, executing at top level), while ``suite_thunk`` only
builds a suite value for later calls, which is what makes suites safe to
bind at module top level.
"""

from __future__ import annotations

from typing import Any, Callable, Iterable, Mapping, Optional, Union

from .capture import capture_expression, derive_args
from .model import AssertionSpec, SuiteNode, TestCase, make_assertion
from .runner import current_runner

Metadata = Union[Mapping[str, Any], Iterable[tuple[str, Any]], None]


def _metadata_tuple(metadata: Metadata) -> tuple[tuple[str, Any], ...]:
    if metadata is None:
        return ()
    if isinstance(metadata, Mapping):
        return tuple(metadata.items())
    return tuple(metadata)


def check(body: Callable[[], Any], *, text: Optional[str] = None,
          description: Optional[str] = None,
          args: Union[Callable[[], list], list, None] = None) -> Any:
    """Assert that a deferred expression yields a truthy value.

    The expression's source text is captured from ``body`` when possible;
    pass ``text`` to override (or when the body was defined somewhere
    source is unavailable). ``args`` supplies the outermost call's argument
    values for failure reports; by default they are re-derived from the
    body's source.

    At top level this returns the expression's value (or re-raises its
    error); inside a test it feeds the test's outcome.
    """
    expression = text or capture_expression(body)
    if args is None:
        arg_thunk: Callable[[], list] = derive_args(body)
    elif callable(args):
        arg_thunk = args
    else:
        given = list(args)
        arg_thunk = lambda: given
    spec = make_assertion(expression, body, arg_thunk, description)
    return current_runner().handle({"type": "run-assertion", "spec": spec})


def run_assertion_spec(spec: AssertionSpec) -> Any:
    """Send an already-built assertion to the current runner."""
    return current_runner().handle({"type": "run-assertion", "spec": spec})


def test(description: str, metadata: Metadata = None) -> Callable[[Callable[[], Any]], None]:
    """Define a test: decorate a zero-argument body.

    Inside a suite body the test is registered for scheduled execution; at
    top level it executes immediately. Either way the definition evaluates
    to nothing, so surrounding code cannot grow a dependency on it.
    """

    def define(fn: Callable[[], Any]) -> None:
        code = getattr(fn, "__code__", None)
        location = (code.co_filename, code.co_firstlineno) if code else None
        case = TestCase(description=description, body=fn,
                        metadata=_metadata_tuple(metadata), source_location=location)
        current_runner().handle({"type": "run-test-body-thunk", "test": case})
        return None

    return define


def suite(description: str, metadata: Metadata = None) -> Callable[[Callable[[], Any]], SuiteNode]:
    """Define a suite and hand its body to the runner right away.

    At top level the default runner loads the suite and executes it;
    nested inside another suite body it just registers as a child.
    """

    def define(fn: Callable[[], Any]) -> SuiteNode:
        node = SuiteNode(description=description, body=fn, metadata=_metadata_tuple(metadata))
        node()
        return node

    return define


def suite_thunk(description: str, metadata: Metadata = None) -> Callable[[Callable[[], Any]], SuiteNode]:
    """Build a suite value without loading or executing it.

    The result is an ordinary zero-argument callable flagged as a suite;
    call it to load and run, or ``node(execute=False)`` to only load.
    """

    def define(fn: Callable[[], Any]) -> SuiteNode:
        return SuiteNode(description=description, body=fn, metadata=_metadata_tuple(metadata))

    return define
