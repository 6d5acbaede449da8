"""flowtest: runtime-first testing for uninterrupted development flow.

Assertions, tests, and suites are first-class runtime values executed by a
stateful, message-driven runner. Run-history-aware scheduling (fail-fast,
failing-first, rerun-failed, filtering, parallel workers), composable
reporters with TAP/JUnit emission, and a line-based daemon protocol keep
test feedback inside sub-second attention budgets.
"""

from .api import check, run_assertion_spec, suite, suite_thunk, test
from .model import (
    ATTENTION,
    FLOW,
    INSTANTANEOUS,
    LATENCY_BUDGET,
    AssertionSpec,
    CheckFailure,
    FailureContext,
    FlowtestError,
    HierarchyNode,
    InvalidNesting,
    InvalidStructure,
    Judgement,
    LatencyBudget,
    Outcome,
    ProtocolError,
    RunEvent,
    RunSummary,
    SuiteNode,
    TestCase,
    ValidationError,
    judge,
    make_assertion,
    split_test_id,
    summarize_events,
    test_id,
)
from .runner import (
    Runner,
    RunnerOptions,
    RunRecord,
    current_runner,
    default_runner,
    make_runner,
    set_default_runner,
    use_runner,
    with_runner,
)
from .reporting import (
    base_reporter,
    builtin,
    emit_junit,
    emit_tap,
    named_reporter,
    report_sink,
    sink_to,
    use_all,
    use_first,
)
from .scheduling import (
    RunPlan,
    build_plan,
    duration_bucket,
    execute_plan,
    filter_match,
    plan_for_runner,
    rerun_last,
)
from .history import HistoryStore, load as load_history, project_store
from .discovery import (
    ModulePath,
    SuiteRegistry,
    default_registry,
    get_all_test_modules,
    get_module_test_suites,
    get_test_module,
    load_project_suites,
)

__version__ = "0.1.0"

__all__ = [
    "ATTENTION",
    "AssertionSpec",
    "CheckFailure",
    "FLOW",
    "FailureContext",
    "FlowtestError",
    "HierarchyNode",
    "HistoryStore",
    "INSTANTANEOUS",
    "InvalidNesting",
    "InvalidStructure",
    "Judgement",
    "LATENCY_BUDGET",
    "LatencyBudget",
    "ModulePath",
    "Outcome",
    "ProtocolError",
    "RunEvent",
    "RunPlan",
    "RunRecord",
    "RunSummary",
    "Runner",
    "RunnerOptions",
    "SuiteNode",
    "SuiteRegistry",
    "TestCase",
    "ValidationError",
    "base_reporter",
    "build_plan",
    "builtin",
    "check",
    "current_runner",
    "default_registry",
    "default_runner",
    "duration_bucket",
    "emit_junit",
    "emit_tap",
    "execute_plan",
    "filter_match",
    "get_all_test_modules",
    "get_module_test_suites",
    "get_test_module",
    "judge",
    "load_history",
    "load_project_suites",
    "make_assertion",
    "make_runner",
    "named_reporter",
    "plan_for_runner",
    "project_store",
    "report_sink",
    "rerun_last",
    "run_assertion_spec",
    "set_default_runner",
    "sink_to",
    "split_test_id",
    "suite",
    "suite_thunk",
    "summarize_events",
    "test",
    "test_id",
    "use_all",
    "use_first",
    "use_runner",
    "with_runner",
]
