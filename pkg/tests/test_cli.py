"""CLI tests: config precedence, exit codes, inspection."""

from __future__ import annotations

import json

import pytest
from click.testing import CliRunner

from pkgsleuth.cli import (CliConfig, ConfigError, load_config, main,
                           parse_config_file, render_effective_config)

from .conftest import make_tarball
from .scenario import DROP_DOMAIN, SEARCH_SCENARIOS, scenario_replies


@pytest.fixture
def runner():
    return CliRunner()


# --- configuration ------------------------------------------------------------------

def test_parse_flat_config(tmp_path):
    path = tmp_path / "conf"
    path.write_text("# a comment\nendpoint_url = http://e\nbudget_total = 9\n")
    assert parse_config_file(path) == {"endpoint_url": "http://e",
                                       "budget_total": "9"}


def test_precedence_flags_env_file(tmp_path, monkeypatch):
    path = tmp_path / "conf"
    path.write_text("budget_total = 5\nwall_timeout = 100\ninner_budget = 2\n")
    monkeypatch.setenv("PKGSLEUTH_WALL_TIMEOUT", "200")
    monkeypatch.setenv("PKGSLEUTH_INNER_BUDGET", "3")
    cfg = load_config(str(path), {"inner_budget": "4"})
    assert cfg.budget_total == 5       # file
    assert cfg.wall_timeout == 200.0   # env beats file
    assert cfg.inner_budget == 4       # flag beats env


def test_unknown_key_rejected(tmp_path):
    path = tmp_path / "conf"
    path.write_text("no_such_option = 1\n")
    with pytest.raises(ConfigError, match="no_such_option"):
        load_config(str(path), {})


def test_secrets_redacted_in_effective_config():
    cfg = CliConfig(api_key="super-secret-value",
                    intel_api_key="another-secret")
    rendered = render_effective_config(cfg)
    assert "super-secret-value" not in rendered
    assert "another-secret" not in rendered
    assert "***redacted***" in rendered


# --- analyze ------------------------------------------------------------------------

def benign_replies() -> list[dict]:
    return [
        {"role": "supervisor", "match": "TASK: produce", "response": {
            "rationale": "routine check",
            "steps": [{"worker": "deobfuscator",
                       "objective": "review the install hook for hidden "
                                    "behavior",
                       "priority": "normal", "inputs": []}]}},
        {"role": "worker", "response": {
            "action": "final",
            "summary": "plain setuptools boilerplate, nothing hidden",
            "findings": []}},
        {"role": "supervisor", "match": "TASK: revise",
         "response": {"rationale": "nothing left", "steps": []}},
        {"role": "supervisor", "match": "TASK: compose", "response": {
            "verdict": "benign", "confidence": "high",
            "threat_overview": "ordinary package",
            "attack_chain": [], "iocs": [], "recommendations": []}},
    ]


def write_replies(tmp_path, replies) -> str:
    path = tmp_path / "replies.json"
    path.write_text(json.dumps(replies))
    return str(path)


def write_config(tmp_path, **keys) -> str:
    path = tmp_path / "pkgsleuth.conf"
    path.write_text("".join(f"{k} = {v}\n" for k, v in keys.items()))
    return str(path)


@pytest.fixture
def benign_archive(tmp_path):
    return make_tarball(tmp_path / "plain-1.0.tar.gz", {
        "plain-1.0/setup.py": "from setuptools import setup\nsetup()\n",
        "plain-1.0/plain/__init__.py": "__version__ = '1.0'\n",
    })


def test_analyze_benign_exits_zero(runner, tmp_path, benign_archive):
    config = write_config(
        tmp_path, backend="scripted",
        scripted_replies=write_replies(tmp_path, benign_replies()),
        run_root=str(tmp_path / "runs"))
    result = runner.invoke(main, ["analyze", str(benign_archive),
                                  "--config", config,
                                  "--run-dir", str(tmp_path / "runs/one")])
    assert result.exit_code == 0, result.output + str(result.stderr)
    assert "verdict: benign" in result.output
    report = (tmp_path / "runs/one/report.txt").read_text()
    assert "BENIGN" in report


def test_analyze_dropper_scenario_exits_three(runner, tmp_path,
                                              dropper_archive, intel_server):
    intel_server.seed_domain(DROP_DOMAIN, {"malicious": 7, "harmless": 55})
    search_path = tmp_path / "search.json"
    search_path.write_text(json.dumps(SEARCH_SCENARIOS))
    config = write_config(
        tmp_path, backend="scripted",
        scripted_replies=write_replies(
            tmp_path, scenario_replies("libdemo-7.3/setup.py")),
        intel_url=intel_server.url,
        search_scripted=str(search_path),
        run_root=str(tmp_path / "runs"))
    result = runner.invoke(main, ["analyze", str(dropper_archive),
                                  "--config", config,
                                  "--run-dir", str(tmp_path / "runs/drop")])
    assert result.exit_code == 3, result.output + str(result.stderr)
    report = (tmp_path / "runs/drop/report.txt").read_text()
    assert "hxxps://dl[.]example-files[.]test/pkg/updater[.]bin" in report
    assert "MALICIOUS" in report


def test_analyze_missing_endpoint_config_exits_two(runner, tmp_path,
                                                   benign_archive):
    run_root = tmp_path / "never-created"
    config = write_config(tmp_path, backend="http",
                          run_root=str(run_root))
    result = runner.invoke(main, ["analyze", str(benign_archive),
                                  "--config", config])
    assert result.exit_code == 2
    assert "endpoint_url" in result.stderr
    assert not run_root.exists()


def test_analyze_missing_archive_exits_two(runner, tmp_path):
    config = write_config(tmp_path, backend="scripted",
                          scripted_replies=write_replies(tmp_path, []))
    result = runner.invoke(main, ["analyze", str(tmp_path / "ghost.tar.gz"),
                                  "--config", config])
    assert result.exit_code == 2


# --- inspect ------------------------------------------------------------------------

def test_inspect_completed_run(runner, tmp_path, benign_archive):
    run_dir = tmp_path / "runs/done"
    config = write_config(
        tmp_path, backend="scripted",
        scripted_replies=write_replies(tmp_path, benign_replies()))
    assert runner.invoke(main, ["analyze", str(benign_archive),
                                "--config", config,
                                "--run-dir", str(run_dir)]).exit_code == 0
    result = runner.invoke(main, ["inspect", str(run_dir)])
    assert result.exit_code == 0
    assert "phase: done" in result.output
    assert "verdict: benign" in result.output
    assert "chat_trace.jsonl" in result.output


def test_inspect_timed_out_run_flags_partial(runner, tmp_path, dropper_scope):
    from pkgsleuth.gateway import Gateway, default_roles
    from pkgsleuth.supervisor import AnalysisConfig, run_analysis
    from pkgsleuth.workers import bind_tools
    from .conftest import scripted_backend_from
    replies = [
        {"role": "supervisor", "match": "TASK: produce", "delay": 1.0,
         "response": {"rationale": "", "steps": []}},
    ]
    run_dir = tmp_path / "runs/slow"
    outcome = run_analysis(
        dropper_scope,
        AnalysisConfig(wall_timeout_s=0.2, hard_cancel_grace_s=3.0,
                       run_dir=run_dir),
        Gateway(scripted_backend_from(replies), default_roles()),
        bind_tools())
    assert outcome.status == "timeout"
    result = runner.invoke(main, ["inspect", str(run_dir)])
    assert result.exit_code == 0
    assert "partial results attached" in result.output


def test_inspect_empty_directory_is_corrupt(runner, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    result = runner.invoke(main, ["inspect", str(empty)])
    assert result.exit_code == 1
    assert "corrupt" in result.stderr


def test_inspect_bad_checkpoint_named_violation(runner, tmp_path):
    run_dir = tmp_path / "broken"
    run_dir.mkdir()
    (run_dir / "state.json").write_text("{not json")
    result = runner.invoke(main, ["inspect", str(run_dir)])
    assert result.exit_code == 1
    assert "corrupt" in result.stderr


# --- metrics command ----------------------------------------------------------------

def test_metrics_command(runner, tmp_path):
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text(
        '{"path": "a.tar.gz", "label": "malicious", "id": "m1"}\n'
        '{"path": "b.tar.gz", "label": "benign", "id": "b1"}\n')
    records = tmp_path / "records.jsonl"
    records.write_text(
        '{"package_id": "m1", "trial": 1, "outcome": "malicious", '
        '"wall_time": 3.0}\n'
        '{"package_id": "b1", "trial": 1, "outcome": "benign", '
        '"wall_time": 2.0}\n')
    out = tmp_path / "metrics.json"
    result = runner.invoke(main, ["metrics", "--records", str(records),
                                  "--manifest", str(manifest),
                                  "--out", str(out)])
    assert result.exit_code == 0
    payload = json.loads(out.read_text())
    assert payload["recall_at_k"]["1"] == 1.0
    assert payload["confusion_at_trial_1"]["tp"] == 1


def test_metrics_incomplete_records(runner, tmp_path):
    manifest = tmp_path / "manifest.jsonl"
    manifest.write_text('{"path": "a", "label": "malicious", "id": "m1"}\n')
    records = tmp_path / "records.jsonl"
    records.write_text("")
    result = runner.invoke(main, ["metrics", "--records", str(records),
                                  "--manifest", str(manifest)])
    assert result.exit_code == 1
    assert "m1" in result.stderr
