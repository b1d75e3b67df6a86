from __future__ import annotations

import json
from pathlib import Path

import pytest

from keyfort import main


def test_run_prints_the_outcome(scenarios_dir: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["run", str(scenarios_dir / "update_happy.scn")]) == 0
    out = capsys.readouterr().out
    assert "outcome: Committed" in out
    assert "violations: 0" in out


def test_run_with_a_seed_override(scenarios_dir: Path, capsys: pytest.CaptureFixture[str]) -> None:
    assert main(["run", str(scenarios_dir / "migration_happy.scn"), "--seed", "7"]) == 0
    assert "outcome: Committed" in capsys.readouterr().out


def test_recorded_trace_can_be_rechecked(scenarios_dir: Path, tmp_path: Path) -> None:
    trace = tmp_path / "update.jsonl"
    assert main(["run", str(scenarios_dir / "update_happy.scn"), "--trace", str(trace)]) == 0
    assert trace.exists()
    assert main(["predicates", str(trace)]) == 0


def test_expected_violation_exits_five(scenarios_dir: Path, tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    trace = tmp_path / "rollback.jsonl"
    assert main(["run", str(scenarios_dir / "rollback_vulnerable.scn"), "--trace", str(trace)]) == 5
    assert "[software-rollback]" in capsys.readouterr().out
    assert main(["predicates", str(trace)]) == 2


def test_malformed_scenario_is_a_usage_error(tmp_path: Path) -> None:
    broken = tmp_path / "broken.scn"
    broken.write_text(json.dumps({"devices": [{"name": "sm0"}]}), encoding="utf-8")
    assert main(["run", str(broken)]) == 3
    assert main(["run", str(tmp_path / "missing.scn")]) == 3


def test_unknown_command_is_a_usage_error() -> None:
    assert main(["explode"]) == 3
    assert main([]) == 3


def test_sweep_rejects_bad_arguments(scenarios_dir: Path) -> None:
    assert main(["sweep", str(scenarios_dir / "update_happy.scn"), "--jobs", "0"]) == 3
    assert main(["sweep", str(scenarios_dir / "update_happy.scn"), "--spec", "everything"]) == 3
    assert main(["sweep", str(scenarios_dir / "clone_attack.scn")]) == 3


@pytest.mark.slow
def test_sweep_writes_a_report(scenarios_dir: Path, tmp_path: Path) -> None:
    report = tmp_path / "report.json"
    assert main(["sweep", str(scenarios_dir / "update_happy.scn"), "--spec", "crashes", "--report", str(report)]) == 0
    data = json.loads(report.read_text(encoding="utf-8"))
    assert data["spec"] == "crashes"
    assert data["message_cases"] == 0
    assert data["total_cases"] == data["crash_cases"] == len(data["cases"])
    assert data["violations"] == []
