import json

import pytest
from hypothesis import given, strategies as st

import flowtest as ft
from flowtest.model import render_value, summarize_events


# Truthiness table: only False and the absent value are falsy.
TRUTHINESS_TABLE = [
    (False, False),
    (None, False),
    (True, True),
    (0, True),
    (0.0, True),
    ("", True),
    ("hello", True),
    ([], True),
    ({}, True),
    (object(), True),
]


@pytest.mark.parametrize("value,expected", TRUTHINESS_TABLE)
def test_judge_truthiness_table(value, expected):
    assert ft.judge(value).truthy is expected


def test_judge_symbol_like_value_is_truthy():
    assert ft.judge("hello").truthy is True


def test_judge_default_argument_is_absent():
    assert ft.judge().truthy is False


@given(st.one_of(st.booleans(), st.none(), st.integers(), st.text(), st.floats(allow_nan=True)))
def test_judge_total_and_deterministic(value):
    first = ft.judge(value)
    second = ft.judge(value)
    assert first.truthy == second.truthy
    assert isinstance(first.rendered_value, str)


def test_render_value_truncates():
    rendered = render_value("x" * 10_000)
    assert len(rendered) <= 4096
    assert rendered.endswith("…")


def test_render_value_survives_hostile_repr():
    class Hostile:
        def __str__(self):
            raise RuntimeError("no rendering for you")

    assert "Hostile" in render_value(Hostile())


class TestMakeAssertion:
    def test_carries_pieces_without_executing(self):
        ran = []
        spec = ft.make_assertion("(= 4 (+ 2 2))", lambda: ran.append(1) or 4 == 4,
                                 lambda: [4, 4])
        assert spec.expression_text == "(= 4 (+ 2 2))"
        assert spec.description is None
        assert ran == []

    def test_constant_truth(self):
        spec = ft.make_assertion("#t", lambda: True, lambda: [])
        assert spec.body() is True
        assert spec.args() == []

    def test_description_annotation(self):
        spec = ft.make_assertion("(equal? 'hi 'hey)", lambda: False, lambda: ["hi", "hey"],
                                 description="school math")
        assert spec.description == "school math"

    def test_empty_expression_rejected(self):
        with pytest.raises(ft.ValidationError):
            ft.make_assertion("", lambda: True, lambda: [])


class TestTestId:
    def test_empty_path(self):
        assert ft.test_id([], "Test 1") == "Test 1"

    def test_nested_path_round_trips(self):
        path = ["sample-tests", "Nested test suite"]
        identity = ft.test_id(path, "Test 2")
        assert identity == "sample-tests/Nested test suite/Test 2"
        assert ft.split_test_id(identity) == path + ["Test 2"]

    def test_separator_in_segment_still_injective(self):
        # Brute force over a small alphabet including the separator and the
        # escape character: no two distinct inputs may collide.
        alphabet = ["a", "/", "\\", "a/b", "\\/", ""]
        seen: dict[str, tuple] = {}
        for first in alphabet:
            for second in alphabet:
                for description in ("x", "/", "x/y", "\\"):
                    path = [s for s in (first, second) if s]
                    key = (tuple(path), description)
                    identity = ft.test_id(path, description)
                    assert ft.split_test_id(identity) == list(path) + [description]
                    assert seen.get(identity, key) == key, (
                        f"collision: {seen[identity]} vs {key}"
                    )
                    seen[identity] = key

    def test_empty_description_rejected(self):
        with pytest.raises(ft.ValidationError):
            ft.test_id([], "")


def _tree(depth: int, rng_state: int) -> ft.HierarchyNode:
    import random

    rng = random.Random(rng_state)

    def build(level: int, label: str) -> ft.HierarchyNode:
        if level >= depth or rng.random() < 0.4:
            case = ft.TestCase(description=f"test {label}", body=lambda: None,
                               metadata=(("k", label),), id=f"id-{label}")
            return ft.HierarchyNode.leaf(case)
        children = tuple(build(level + 1, f"{label}.{i}") for i in range(rng.randint(1, 3)))
        return ft.HierarchyNode.suite(f"suite {label}", (("m", label),), children)

    return build(0, "r")


@pytest.mark.parametrize("state", range(20))
def test_hierarchy_json_round_trip(state):
    node = _tree(4, state)
    text = json.dumps(node.to_json())
    rebuilt = ft.HierarchyNode.from_json(json.loads(text))

    def shape(n: ft.HierarchyNode):
        return (n.kind, n.description, dict(n.metadata), [shape(c) for c in n.children])

    assert shape(rebuilt) == shape(node)
    assert [p for p, _ in rebuilt.walk()] == [p for p, _ in node.walk()]


class TestRunSummary:
    def test_counts_validated(self):
        with pytest.raises(ft.ValidationError):
            ft.RunSummary(errors=-1)
        with pytest.raises(ft.ValidationError):
            ft.RunSummary(errors=2, failures=1, assertions=2, tests=1)

    def test_render_matches_alist_shape(self):
        text = ft.RunSummary(errors=0, failures=1, assertions=3, tests=2).render()
        assert text == "((errors . 0)\n (failures . 1)\n (assertions . 3)\n (tests . 2))"

    def test_json_round_trip(self):
        summary = ft.RunSummary(errors=1, failures=2, assertions=9, tests=4)
        assert ft.RunSummary.from_json(summary.to_json()) == summary


class TestOutcome:
    def test_error_requires_detail(self):
        with pytest.raises(ft.ValidationError):
            ft.Outcome("error")

    def test_unknown_kind_rejected(self):
        with pytest.raises(ft.ValidationError):
            ft.Outcome("mystery")


def test_summarize_events_against_recount(runner, collect, sample_suite):
    from conftest import naive_events_oracle

    with ft.use_runner(runner):
        summary = sample_suite()
    run_frames = [f for f in collect if str(f["run_id"]).startswith("run-")]
    assert summarize_events(run_frames) == naive_events_oracle(run_frames) == summary
    assert summary == ft.RunSummary(errors=0, failures=1, assertions=3, tests=2)
