"""Shared fixtures: silent runners, the sample suite, and fixture projects."""

from __future__ import annotations

import random
import textwrap
from pathlib import Path

import pytest

import flowtest as ft


def silent(event) -> bool:
    return True


@pytest.fixture
def runner() -> ft.Runner:
    return ft.Runner(reporter=silent, options=ft.RunnerOptions(sequential=True))


@pytest.fixture
def collect(runner):
    """Tap the runner and return the list frames accumulate into."""
    frames: list[dict] = []
    runner.add_tap(lambda event: frames.append(event.to_frame()))
    return frames


def build_sample_suite(probe: "dict | None" = None) -> ft.SuiteNode:
    """The worked example: Test 1 passes, nested Test 2 fails its first check."""

    @ft.suite_thunk("sample-tests")
    def sample_tests():
        @ft.test("Test 1")
        def _():
            if probe is not None:
                probe["Test 1"] = probe.get("Test 1", 0) + 1
            ft.check(lambda: True, text="#t")

        @ft.suite("Nested test suite")
        def _nested():
            @ft.test("Test 2")
            def _():
                if probe is not None:
                    probe["Test 2"] = probe.get("Test 2", 0) + 1
                ft.check(lambda: 5 == (2 + 2), text="(= 5 (+ 2 2))", args=lambda: [5, 2 + 2])
                ft.check(lambda: "hello", text="'hello")

    return sample_tests


@pytest.fixture
def sample_suite() -> ft.SuiteNode:
    return build_sample_suite()


def make_flat_suite(name: str, outcomes: "list[str]", sleep: float = 0.0) -> ft.SuiteNode:
    """A suite of single-assertion tests with scripted outcomes.

    ``outcomes`` entries are "pass", "fail", or "error"; test N is named
    "t<N>".
    """

    @ft.suite_thunk(name)
    def scripted():
        for index, wanted in enumerate(outcomes):
            def body(wanted=wanted):
                if sleep:
                    import time

                    time.sleep(sleep)
                if wanted == "error":
                    ft.check(lambda: 1 // 0, text="(boom)")
                elif wanted == "fail":
                    ft.check(lambda: False, text="#f")
                else:
                    ft.check(lambda: True, text="#t")

            ft.test(f"t{index}")(body)

    return scripted


def random_hierarchy(rng: random.Random, probe: "dict[str, int]", max_depth: int = 3,
                     prefix: str = "s") -> ft.SuiteNode:
    """A random suite tree whose test bodies count executions into ``probe``."""
    children = rng.randint(1, 3)

    def populate(depth: int, label: str) -> None:
        for index in range(rng.randint(1, 3)):
            if depth < max_depth and rng.random() < 0.4:
                inner = f"{label}.{index}"

                @ft.suite(f"suite {inner}")
                def _(inner=inner, depth=depth):
                    populate(depth + 1, inner)
            else:
                name = f"test {label}#{index}"

                def body(name=name, rng_bit=rng.random()):
                    probe[name] = probe.get(name, 0) + 1
                    ft.check(lambda: True, text="#t")

                ft.test(name)(body)

    @ft.suite_thunk(f"{prefix}-root")
    def root():
        populate(1, prefix)
        for index in range(children):
            name = f"test {prefix}-top#{index}"

            def body(name=name):
                probe[name] = probe.get(name, 0) + 1
                ft.check(lambda: True, text="#t")

            ft.test(name)(body)

    return root


SAMPLE_MODULE_SOURCE = textwrap.dedent(
    '''
    import flowtest as ft


    @ft.suite_thunk("sample-tests")
    def sample_tests():
        @ft.test("Test 1")
        def _():
            ft.check(lambda: True, text="#t")

        @ft.suite("Nested test suite")
        def _nested():
            @ft.test("Test 2")
            def _():
                ft.check(lambda: 5 == (2 + 2), text="(= 5 (+ 2 2))", args=lambda: [5, 2 + 2])
                ft.check(lambda: "hello", text="'hello")
    '''
).lstrip()

PASSING_MODULE_SOURCE = textwrap.dedent(
    '''
    import flowtest as ft


    @ft.suite_thunk("tool-suite")
    def tool_suite():
        @ft.test("adds")
        def _():
            ft.check(lambda: 2 + 2 == 4)

        @ft.test("concatenates")
        def _():
            ft.check(lambda: "ab" + "cd" == "abcd")
    '''
).lstrip()


def write_fixture_project(root: Path, passing_only: bool = False) -> Path:
    """A small on-disk project following the src/ + test/ convention."""
    (root / "src" / "my-project").mkdir(parents=True, exist_ok=True)
    (root / "src" / "my-project" / "tool.py").write_text("VALUE = 4\n", encoding="utf-8")
    tests = root / "test" / "my-project"
    tests.mkdir(parents=True, exist_ok=True)
    (tests / "tool-test.py").write_text(PASSING_MODULE_SOURCE, encoding="utf-8")
    if not passing_only:
        (root / "test" / "sample-test.py").write_text(SAMPLE_MODULE_SOURCE, encoding="utf-8")
    (root / "test" / "notes.py").write_text("# not a test module\n", encoding="utf-8")
    return root


@pytest.fixture
def fixture_project(tmp_path) -> Path:
    return write_fixture_project(tmp_path / "proj")


OUTCOME_SCRIPT_KINDS = ("pass", "fail", "error", "skip", "xfail", "xpass")


def scripted_run(script: "list[str]", name: str = "scripted") -> "tuple[list[dict], ft.RunSummary]":
    """Execute a suite of one-assertion tests with the given outcome kinds.

    Returns the run's frames (run events only) and its summary.
    """
    runner = ft.Runner(reporter=silent, options=ft.RunnerOptions(sequential=True))
    frames: list[dict] = []
    runner.add_tap(lambda event: frames.append(event.to_frame()))

    @ft.suite_thunk(name)
    def scripted():
        for index, wanted in enumerate(script):
            metadata = {}
            if wanted == "skip":
                metadata["skip?"] = True
            if wanted in ("xfail", "xpass"):
                metadata["expected-to-fail?"] = True

            def body(wanted=wanted):
                if wanted in ("fail", "xfail"):
                    ft.check(lambda: False, text="#f")
                elif wanted == "error":
                    ft.check(lambda: 1 // 0, text="(boom)")
                else:
                    ft.check(lambda: True, text="#t")

            ft.test(f"{wanted} {index}", metadata=metadata)(body)

    with ft.use_runner(runner):
        summary = scripted()
    run_frames = [f for f in frames if str(f["run_id"]).startswith("run-")]
    return run_frames, summary


def naive_events_oracle(frames: "list[dict]") -> ft.RunSummary:
    """Independent recount: group assertions per test, fold by test outcome.

    Deliberately a second implementation of the summary semantics, kept
    free of the library's own fold.
    """
    per_test: dict[str, list[str]] = {}
    order: list[tuple[str, str]] = []
    assertions = 0
    toplevel_fail = 0
    errors = 0
    for frame in frames:
        if frame.get("event") == "assertion-result":
            assertions += 1
            kind = frame["outcome"]["kind"]
            if kind == "error":
                errors += 1
            if frame.get("test_id") is None and kind == "fail":
                toplevel_fail += 1
            elif frame.get("test_id") is not None:
                per_test.setdefault(frame["test_id"], []).append(kind)
        elif frame.get("event") == "test-leave":
            order.append((frame["test_id"], frame["outcome"]["kind"]))
    failures = toplevel_fail
    for test, outcome in order:
        if outcome in ("fail", "xpass"):
            failures += sum(1 for kind in per_test.get(test, []) if kind == "fail")
    return ft.RunSummary(errors=errors, failures=failures, assertions=assertions,
                         tests=len(order))
