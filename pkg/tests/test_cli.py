import json
import re
import subprocess
import sys
import time
import xml.etree.ElementTree as ET

import pytest

from flowtest.cli import main
from flowtest.daemon import DaemonClient
from conftest import write_fixture_project


def run_cli(*argv) -> int:
    return main(list(argv))


class TestRunCommand:
    def test_failing_filter_exits_one_with_dots_f(self, fixture_project, capsys):
        code = run_cli("run", "--root", str(fixture_project), "--filter", "Test 2",
                       "--seed", "1", "--reporter", "dots")
        captured = capsys.readouterr()
        assert code == 1
        assert captured.out.strip() == "F"

    def test_all_passing_project_exits_zero(self, tmp_path, capsys):
        project = write_fixture_project(tmp_path / "green", passing_only=True)
        code = run_cli("run", "--root", str(project), "--reporter", "silent")
        assert code == 0

    def test_base_reporter_prints_sample_blocks(self, fixture_project, capsys):
        code = run_cli("run", "--root", str(fixture_project), "--filter", "sample",
                       "--sequential")
        captured = capsys.readouterr()
        assert code == 1
        assert "┌> sample-tests" in captured.out
        assert "✗ 5 and 4 are not =" in captured.out

    def test_composed_workflow_flags(self, fixture_project, capsys):
        # First run to record failures, then the composed rerun narrows to them.
        assert run_cli("run", "--root", str(fixture_project), "--reporter", "silent") == 1
        code = run_cli("run", "--root", str(fixture_project), "--fail-fast",
                       "--failing-first", "--rerun-failed", "--reporter", "dots")
        captured = capsys.readouterr()
        assert code == 1
        # Exactly the one previously failing test ran.
        assert captured.out.strip().splitlines()[-1] == "F"

    def test_rerun_failed_subcommand_full_fallback_when_green(self, tmp_path, capsys):
        project = write_fixture_project(tmp_path / "green", passing_only=True)
        assert run_cli("run", "--root", str(project), "--reporter", "silent") == 0
        code = run_cli("rerun-failed", "--root", str(project), "--reporter", "dots")
        captured = capsys.readouterr()
        assert code == 0
        assert captured.out.strip().splitlines()[-1] == ".."

    def test_conflicting_flags_exit_two(self, fixture_project, capsys):
        code = run_cli("run", "--root", str(fixture_project),
                       "--sequential", "--parallel", "2")
        assert code == 2
        assert "mutually exclusive" in capsys.readouterr().err

    def test_unknown_flag_exits_two(self, fixture_project, capsys):
        assert run_cli("run", "--root", str(fixture_project), "--warp-speed") == 2

    def test_missing_root_exits_two(self, tmp_path, capsys):
        assert run_cli("run", "--root", str(tmp_path / "missing")) == 2

    def test_debug_on_failure_exits_one_with_context(self, fixture_project, capsys):
        code = run_cli("run", "--root", str(fixture_project), "--sequential",
                       "--debug-on-failure", "--reporter", "silent")
        captured = capsys.readouterr()
        assert code == 1
        assert "(= 5 (+ 2 2))" in captured.err


class TestReportFiles:
    def test_tap_and_junit_written(self, fixture_project, tmp_path, capsys):
        tap_path = tmp_path / "out.tap"
        junit_path = tmp_path / "out.xml"
        code = run_cli("run", "--root", str(fixture_project), "--sequential",
                       "--reporter", "silent", "--tap", str(tap_path),
                       "--junit", str(junit_path))
        assert code == 1
        tap_text = tap_path.read_text()
        assert tap_text.startswith("TAP version 14\n1..4\n")
        assert "not ok" in tap_text
        document = ET.fromstring(junit_path.read_text())
        assert document.get("tests") == "4"
        assert document.get("failures") == "1"

    def test_seed_reproducibility_identical_order(self, fixture_project, tmp_path, capsys):
        orders = []
        for attempt in ("a", "b"):
            tap_path = tmp_path / f"{attempt}.tap"
            code = run_cli("run", "--root", str(fixture_project), "--seed", "42",
                           "--reporter", "silent", "--tap", str(tap_path))
            assert code == 1
            points = re.findall(r"^(?:not )?ok \d+ - (.+)$", tap_path.read_text(),
                                flags=re.M)
            orders.append(points)
        assert orders[0] == orders[1]
        assert len(orders[0]) == 4


class TestOtherCommands:
    def test_discover_lists_modules(self, fixture_project, capsys):
        assert run_cli("discover", "--root", str(fixture_project)) == 0
        out = capsys.readouterr().out
        assert "(my-project tool-test)" in out
        assert "(sample-test)" in out

    def test_list_outputs_ids_and_history(self, fixture_project, capsys):
        run_cli("run", "--root", str(fixture_project), "--reporter", "silent")
        capsys.readouterr()
        assert run_cli("list", "--root", str(fixture_project)) == 0
        out = capsys.readouterr().out
        assert "sample-tests/Nested test suite/Test 2  [fail" in out

    def test_list_filter(self, fixture_project, capsys):
        assert run_cli("list", "--root", str(fixture_project), "--filter", "tool") == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines and all("tool-suite" in line for line in lines)

    def test_root_from_environment(self, fixture_project, capsys, monkeypatch):
        monkeypatch.setenv("FLOWTEST_ROOT", str(fixture_project))
        assert run_cli("list") == 0
        assert "sample-tests/Test 1" in capsys.readouterr().out


def test_exit_code_counts_xpass_as_failure(tmp_path, capsys):
    project = tmp_path / "xp"
    tests = project / "test"
    tests.mkdir(parents=True)
    (tests / "surprise-test.py").write_text(
        'import flowtest as ft\n\n\n'
        '@ft.suite_thunk("surprise")\n'
        'def surprise():\n'
        '    @ft.test("passes unexpectedly", metadata={"expected-to-fail?": True})\n'
        '    def _():\n'
        '        ft.check(lambda: True, text="#t")\n',
        encoding="utf-8")
    code = run_cli("run", "--root", str(project), "--reporter", "silent")
    assert code == 1


def test_daemon_subcommand_over_subprocess(fixture_project):
    process = subprocess.Popen(
        [sys.executable, "-m", "flowtest.cli", "daemon", "--root", str(fixture_project),
         "--port", "0"],
        stdout=subprocess.PIPE, stderr=subprocess.STDOUT, text=True)
    try:
        line = process.stdout.readline()
        match = re.search(r"listening on 127\.0\.0\.1:(\d+)", line)
        assert match, f"unexpected startup line: {line!r}"
        port = int(match.group(1))
        client = DaemonClient("127.0.0.1", port)
        hello = client.request("hello")
        assert hello["ok"] is True
        run_id = client.request("run", {"filter": "sample"})["run_id"]
        frames = client.frames_until("run-finished", run_id)
        assert frames[-1]["summary"]["tests"] == 2
        client.request("shutdown")
        client.close()
        process.wait(timeout=10)
    finally:
        if process.poll() is None:
            process.kill()
