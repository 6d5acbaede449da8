"""Reporters, reporter combinators, and TAP/JUnit emission.

A reporter is one stateless function: it takes a run event and returns a
truthy value when it handled it, falsy when it did not. Scratch state (such
as the verbose reporter's in-run flag) lives in the event's shared state
cell, keyed by reporter name, so reporter values themselves stay pure and
can be freely combined with :func:`use_all` and :func:`use_first`.

All reporter text goes through the report sink, a dynamically scoped
writable stream defaulting to stdout.
"""

from __future__ import annotations

import sys
import xml.etree.ElementTree as ET
from contextlib import contextmanager
from contextvars import ContextVar
from typing import Callable, IO, Iterable, Optional, Union

from .model import FlowtestError, RunEvent, RunSummary, ValidationError, summarize_events

Reporter = Callable[[RunEvent], bool]

_SINK: ContextVar[Optional[IO[str]]] = ContextVar("flowtest_report_sink", default=None)


def report_sink() -> IO[str]:
    return _SINK.get() or sys.stdout


@contextmanager
def sink_to(stream: IO[str]):
    """Redirect all reporter output to ``stream`` for the extent of the block."""
    token = _SINK.set(stream)
    try:
        yield stream
    finally:
        _SINK.reset(token)


def _line(text: str = "") -> None:
    report_sink().write(text + "\n")


class IncompleteRunError(FlowtestError):
    """The event stream does not span run-started through run-finished."""


# -- combinators ----------------------------------------------------------


def use_all(reporters: list[Reporter]) -> Reporter:
    """Invoke every reporter in order; handled iff at least one handled."""
    if not reporters:
        raise ValidationError("use_all requires at least one reporter")
    chain = list(reporters)

    def combined(event: RunEvent) -> bool:
        handled = False
        for reporter in chain:
            if reporter(event):
                handled = True
        return handled

    return combined


def use_first(reporters: list[Reporter]) -> Reporter:
    """Invoke reporters in order until one handles the event."""
    if not reporters:
        raise ValidationError("use_first requires at least one reporter")
    chain = list(reporters)

    def combined(event: RunEvent) -> bool:
        for reporter in chain:
            if reporter(event):
                return True
        return False

    return combined


# -- built-in reporters -----------------------------------------------------


def silent_reporter(event: RunEvent) -> bool:
    return True


def logging_reporter(event: RunEvent) -> bool:
    _line(f"[{event.run_id}#{event.sequence}] {event.type} {event.payload}")
    return True


def unhandled_reporter(event: RunEvent) -> bool:
    _line(f"unhandled event: {event.type} ({event.run_id}#{event.sequence})")
    return True


def hierarchy_reporter(event: RunEvent) -> bool:
    """Suite-tree glyphs: one line per suite boundary and registered test."""
    if event.type == "suite-enter":
        _line("|" * event.payload["depth"] + "┌> " + event.payload["description"])
        return True
    if event.type == "suite-leave":
        _line("|" * event.payload["depth"] + "└> " + event.payload["description"])
        return True
    if event.type == "test-registered":
        _line("|" * event.payload["depth"] + " + test " + event.payload["description"])
        return True
    return False


def verbose_reporter(event: RunEvent) -> bool:
    """Per-test banners, expression lines with check marks, final summary."""
    if event.type == "run-started":
        event.state_cell.put("verbose.in_run", True)
        return True
    if event.type == "test-enter":
        if event.state_cell.get("verbose.in_run"):
            _line()
        _line("┌Test " + event.payload["description"])
        return True
    if event.type == "assertion-result":
        if event.payload.get("description"):
            _line(f"Checking {event.payload['description']}")
        _line(event.payload["expression_text"])
        if "value" in event.payload:
            _line("=> " + event.payload["value"])
        outcome = event.payload["outcome"]
        if outcome["kind"] == "pass":
            _line("✓")
        else:
            _line("✗ " + (outcome["detail"] or outcome["kind"]))
        return True
    if event.type == "test-leave":
        if event.payload["outcome"]["kind"] == "skip":
            _line("~ skipped")
        _line("└Test " + event.payload["description"])
        return True
    if event.type == "run-finished":
        event.state_cell.put("verbose.in_run", False)
        summary = event.payload.get("summary")
        if summary is not None:
            _line(RunSummary.from_json(summary).render())
        return True
    return False


_DOT_CHARS = {"pass": ".", "fail": "F", "error": "E", "skip": "s", "xfail": "x", "xpass": "X"}


def dots_reporter(event: RunEvent) -> bool:
    if event.type == "test-leave":
        report_sink().write(_DOT_CHARS.get(event.payload["outcome"]["kind"], "?"))
        return True
    if event.type == "run-finished":
        report_sink().write("\n")
        return True
    return False


_BUILTINS: dict[str, Callable[[], Reporter]] = {
    "silent": lambda: silent_reporter,
    "logging": lambda: logging_reporter,
    "unhandled": lambda: unhandled_reporter,
    "hierarchy": lambda: hierarchy_reporter,
    "verbose": lambda: verbose_reporter,
    "dots": lambda: dots_reporter,
}


def builtin(kind: str) -> Reporter:
    try:
        return _BUILTINS[kind]()
    except KeyError:
        raise ValidationError(f"unknown reporter kind: {kind!r}") from None


def base_reporter() -> Reporter:
    """The default compound: verbose and hierarchy, with a diagnostic fallback."""
    return use_first([use_all([verbose_reporter, hierarchy_reporter]), unhandled_reporter])


def named_reporter(name: str) -> Reporter:
    if name == "base":
        return base_reporter()
    return builtin(name)


# -- report emission ----------------------------------------------------------

Frames = Iterable[Union[RunEvent, dict]]


def _run_frames(events: Frames) -> list[dict]:
    frames = [e.to_frame() if isinstance(e, RunEvent) else e for e in events]
    kinds = [f.get("event") for f in frames]
    if "run-started" not in kinds or "run-finished" not in kinds:
        raise IncompleteRunError("event stream must span run-started through run-finished")
    return frames


def _escape_tap(text: str) -> str:
    return text.replace("\\", "\\\\").replace("#", "\\#")


def emit_tap(events: Frames) -> str:
    """TAP version 14 text for one complete run."""
    frames = _run_frames(events)
    leaves = [f for f in frames if f.get("event") == "test-leave"]
    lines = ["TAP version 14", f"1..{len(leaves)}"]
    for index, leaf in enumerate(leaves, start=1):
        kind = leaf["outcome"]["kind"]
        description = _escape_tap(leaf["test_id"])
        if kind == "pass":
            lines.append(f"ok {index} - {description}")
        elif kind == "skip":
            lines.append(f"ok {index} - {description} # SKIP")
        elif kind == "xfail":
            lines.append(f"not ok {index} - {description} # TODO expected failure")
        elif kind == "xpass":
            lines.append(f"ok {index} - {description} # TODO unexpected pass")
        else:
            lines.append(f"not ok {index} - {description}")
            detail = leaf["outcome"].get("detail")
            if detail:
                lines.append("# " + detail.replace("\n", " "))
    return "\n".join(lines) + "\n"


def _assertion_children(frames: list[dict], test_id: str) -> list[dict]:
    return [f for f in frames
            if f.get("event") == "assertion-result" and f.get("test_id") == test_id]


def emit_junit(events: Frames) -> str:
    """JUnit XML with nested testsuite elements mirroring the run's hierarchy."""
    frames = _run_frames(events)
    summary = summarize_events(frames)
    skipped = sum(1 for f in frames
                  if f.get("event") == "test-leave" and f["outcome"]["kind"] in ("skip", "xfail"))
    total_time = sum(f.get("duration_s", 0.0) for f in frames if f.get("event") == "test-leave")

    root = ET.Element("testsuites", {
        "tests": str(summary.tests),
        "failures": str(summary.failures),
        "errors": str(summary.errors),
        "skipped": str(skipped),
        "time": f"{total_time:.6f}",
    })

    suite_elements: dict[tuple[str, ...], ET.Element] = {}

    def suite_element(path: tuple[str, ...]) -> ET.Element:
        if not path:
            path = ("(top level)",)
        if path not in suite_elements:
            parent = root if len(path) == 1 else suite_element(path[:-1])
            suite_elements[path] = ET.SubElement(parent, "testsuite", {"name": path[-1]})
        return suite_elements[path]

    paths: dict[str, tuple[str, ...]] = {}
    for frame in frames:
        if frame.get("event") == "test-enter":
            paths[frame["test_id"]] = tuple(frame.get("suite_path", ()))

    for frame in frames:
        if frame.get("event") != "test-leave":
            continue
        test = frame["test_id"]
        kind = frame["outcome"]["kind"]
        case = ET.SubElement(suite_element(paths.get(test, ())), "testcase", {
            "name": frame["description"],
            "time": f"{frame.get('duration_s', 0.0):.6f}",
        })
        if kind == "skip":
            ET.SubElement(case, "skipped")
        elif kind == "xfail":
            ET.SubElement(case, "skipped", {"message": "expected failure"})
        else:
            for result in _assertion_children(frames, test):
                outcome = result["outcome"]
                if outcome["kind"] == "error":
                    child = ET.SubElement(case, "error", {"message": outcome["detail"] or "error"})
                    child.text = result["expression_text"]
                elif outcome["kind"] == "fail" and kind in ("fail", "xpass"):
                    child = ET.SubElement(case, "failure", {"message": outcome["detail"] or "failure"})
                    child.text = result["expression_text"]

    # Roll per-suite counts up the tree.
    def annotate(element: ET.Element) -> tuple[int, int, int, int, float]:
        tests = failures = errors = skips = 0
        elapsed = 0.0
        for child in element:
            if child.tag == "testsuite":
                t, f, e, s, d = annotate(child)
                tests, failures, errors, skips = tests + t, failures + f, errors + e, skips + s
                elapsed += d
            elif child.tag == "testcase":
                tests += 1
                elapsed += float(child.get("time", "0"))
                failures += sum(1 for sub in child if sub.tag == "failure")
                errors += sum(1 for sub in child if sub.tag == "error")
                skips += sum(1 for sub in child if sub.tag == "skipped")
        if element.tag == "testsuite":
            element.set("tests", str(tests))
            element.set("failures", str(failures))
            element.set("errors", str(errors))
            element.set("skipped", str(skips))
            element.set("time", f"{elapsed:.6f}")
        return tests, failures, errors, skips, elapsed

    for child in root:
        annotate(child)

    ET.indent(root)
    return '<?xml version="1.0" encoding="UTF-8"?>\n' + ET.tostring(root, encoding="unicode") + "\n"
