"""Orchestration tests: planning, revision, reporting, and full analyses."""

from __future__ import annotations

import json
import time

import pytest

from pkgsleuth.gateway import Gateway, RunTrace, ScriptedBackend, default_roles
from pkgsleuth.state import (Finding, Plan, PlanStep, WorkerResult,
                             add_finding, install_plan, new_state)
from pkgsleuth.supervisor import (AnalysisConfig, AnalysisFailure,
                                  generate_initial_plan, revise_plan,
                                  run_analysis, seed_ingest_findings,
                                  synthesize_report)
from pkgsleuth.tools.web import ScriptedIntelProvider, IntelInspector
from pkgsleuth.workers import bind_tools

from .conftest import scripted_backend_from
from .scenario import (DROP_DOMAIN, DROP_URL, scenario_gateway,
                       scenario_toolbox)
from .test_state import make_scope


def gateway_with(*replies, role="supervisor") -> Gateway:
    backend = ScriptedBackend()
    for reply in replies:
        text = reply if isinstance(reply, str) else json.dumps(reply)
        backend.add(text, role=role)
    return Gateway(backend, default_roles(), backoff_base_s=0.01)


def plan_payload(*steps) -> dict:
    return {"rationale": "test plan", "steps": list(steps)}


def raw_step(worker="deobfuscator", objective="inspect the setup hook",
             priority="normal", inputs=()) -> dict:
    return {"worker": worker, "objective": objective, "priority": priority,
            "inputs": list(inputs)}


def intel_inspector() -> IntelInspector:
    return IntelInspector(ScriptedIntelProvider(domains={
        DROP_DOMAIN: {"verdict_counts": {"malicious": 7, "harmless": 55}},
    }))


# --- initial plan ------------------------------------------------------------------

def test_initial_plan_three_steps():
    state = new_state(make_scope(), 12)
    gateway = gateway_with(plan_payload(
        raw_step(), raw_step(worker="web_researcher",
                             objective="verify the author identity"),
        raw_step(objective="examine the encoded blob", priority="high")))
    plan = generate_initial_plan(state, gateway)
    assert plan.revision == 1
    assert [s.id for s in plan.steps] == ["s1", "s2", "s3"]


def test_initial_plan_invalid_worker_reprompted_then_fails():
    bad = plan_payload(raw_step(worker="disassembler"))
    gateway = gateway_with(bad, bad)
    state = new_state(make_scope(), 12)
    with pytest.raises(AnalysisFailure, match="disassembler"):
        generate_initial_plan(state, gateway)


def test_initial_plan_recovers_after_validation_reprompt():
    state = new_state(make_scope(), 12)
    gateway = gateway_with(
        plan_payload(raw_step(worker="disassembler")),
        plan_payload(raw_step()))
    plan = generate_initial_plan(state, gateway)
    assert len(plan.steps) == 1
    assert plan.steps[0].worker == "deobfuscator"


def test_initial_plan_drops_unknown_input_refs():
    state = new_state(make_scope(), 12)
    gateway = gateway_with(plan_payload(
        raw_step(inputs=["setup.py", "finding:f99", "nonsense.txt"])))
    plan = generate_initial_plan(state, gateway)
    assert plan.steps[0].inputs == ("file:setup.py",)


# --- revision ----------------------------------------------------------------------

def completed_result(step_id="s1", summary="found a suspicious URL"):
    return WorkerResult(step_id=step_id, status="completed", summary=summary)


def executing_state(budget_used=0, pending=("s1",)):
    state = new_state(make_scope(), 12)
    steps = [PlanStep(id=sid, worker="deobfuscator",
                      objective=f"objective {sid}") for sid in pending]
    install_plan(state, Plan(steps=steps, revision=1))
    state.budget.used = budget_used
    return state


def test_revision_increments_and_steps_renumbered():
    state = executing_state()
    gateway = gateway_with(plan_payload(raw_step(), raw_step()))
    plan = revise_plan(state, completed_result(), gateway)
    assert plan.revision == 2
    assert [s.id for s in plan.steps] == ["s2", "s3"]


def test_wind_down_keeps_only_high_priority():
    state = executing_state(budget_used=10)  # remaining 2 <= 25% of 12
    gateway = gateway_with(plan_payload(
        raw_step(priority="high", objective="chase the payload host"),
        raw_step(priority="low", objective="tidy up notes")))
    plan = revise_plan(state, completed_result(), gateway)
    assert [s.priority for s in plan.steps] == ["high"]


def test_no_wind_down_with_budget_headroom():
    state = executing_state(budget_used=2)
    gateway = gateway_with(plan_payload(
        raw_step(priority="high"), raw_step(priority="low")))
    plan = revise_plan(state, completed_result(), gateway)
    assert len(plan.steps) == 2


def test_empty_revision_moves_to_reporting():
    state = executing_state()
    gateway = gateway_with({"rationale": "done", "steps": []})
    plan = revise_plan(state, completed_result(), gateway)
    install_plan(state, plan)
    assert state.phase == "reporting"


# --- report synthesis ---------------------------------------------------------------

def reporting_state(findings=()):
    state = new_state(make_scope(), 12)
    for kind, summary, evidence in findings:
        add_finding(state, kind, summary, evidence, "s1")
    state.phase = "reporting"
    return state


def report_payload(**overrides) -> dict:
    payload = {
        "verdict": "malicious", "confidence": "high",
        "threat_overview": "stage download",
        "attack_chain": [{"stage": "drops binary", "evidence": ["f1"]}],
        "iocs": [{"kind": "url", "value": "https://host.example/x",
                  "source_finding": "f1"}],
        "recommendations": ["block it"],
    }
    payload.update(overrides)
    return payload


def test_report_grounded_ioc_kept():
    state = reporting_state(findings=(
        ("threat_intel", "intel hit",
         {"detail": "url https://host.example/x flagged"}),))
    gateway = gateway_with(report_payload())
    report = synthesize_report(state, gateway)
    assert report.verdict == "malicious"
    assert [ioc.value for ioc in report.iocs] == ["hxxps://host[.]example/x"]
    assert report.warnings == []


def test_invented_ioc_dropped_with_warning():
    state = reporting_state(findings=(
        ("threat_intel", "intel hit", {"detail": "nothing about that url"}),))
    gateway = gateway_with(report_payload(
        iocs=[{"kind": "url", "value": "https://invented.example/zz",
               "source_finding": "f1"}],))
    report = synthesize_report(state, gateway)
    assert report.iocs == []
    assert any("invented.example" in w for w in report.warnings)


def test_zero_suspicious_findings_benign():
    state = reporting_state()
    gateway = gateway_with(report_payload(
        verdict="benign", attack_chain=[], iocs=[]))
    report = synthesize_report(state, gateway)
    assert report.verdict == "benign"


def test_schema_failure_falls_back_to_needs_review():
    backend = ScriptedBackend()
    for _ in range(2):
        backend.add("no json here", role="supervisor")
    for _ in range(6):
        backend.add("still no json", role="structurer")
    gateway = Gateway(backend, default_roles(), backoff_base_s=0.01)
    state = reporting_state(findings=(
        ("code_pattern", "weird exec", {"detail": "exec call"}),))
    report = synthesize_report(state, gateway)
    assert report.verdict == "needs_review"
    assert any("fallback" in w for w in report.warnings)


def test_ioc_attribution_repaired_to_containing_finding():
    state = reporting_state(findings=(
        ("code_pattern", "no url here", {"detail": "plain"}),
        ("suspicious_url", "has the url",
         {"detail": "https://host.example/x"}),
    ))
    gateway = gateway_with(report_payload())  # claims f1 as the source
    report = synthesize_report(state, gateway)
    assert report.iocs[0].source_finding == "f2"


# --- seeded ingest findings -------------------------------------------------------------

def test_seed_ingest_findings():
    scope = make_scope()
    scope.dynamic_import_paths = ["setup.py"]
    scope.unresolved_imports = [".ghost"]
    state = new_state(scope, 12)
    seed_ingest_findings(state)
    kinds = [f.kind for f in state.findings]
    assert "code_pattern" in kinds and "metadata_signal" in kinds
    assert all(f.source == "ingest" for f in state.findings)


# --- full analyses -----------------------------------------------------------------------

def run_scenario(dropper_scope, tmp_path, run_name="run"):
    setup_path = next(f.path for f in dropper_scope.files
                      if f.path.endswith("setup.py"))
    gateway = scenario_gateway(setup_path)
    toolbox = scenario_toolbox(intel_inspector())
    config = AnalysisConfig(run_dir=tmp_path / run_name, wall_timeout_s=30.0)
    return run_analysis(dropper_scope, config, gateway, toolbox)


def test_full_scripted_scenario(dropper_scope, tmp_path):
    outcome = run_scenario(dropper_scope, tmp_path)
    assert outcome.status == "completed"
    report = outcome.report
    assert report.verdict == "malicious"
    assert len(outcome.state_snapshot.task_log) == 4
    workers = [r.worker for r in outcome.state_snapshot.task_log]
    assert workers == ["deobfuscator", "web_researcher", "web_researcher",
                       "web_researcher"]
    ioc_values = [ioc.value for ioc in report.iocs]
    assert "hxxps://dl[.]example-files[.]test/pkg/updater[.]bin" in ioc_values
    # revision history: initial plan + 4 revisions
    assert outcome.state_snapshot.plan.revision == 5
    assert (tmp_path / "run" / "report.json").exists()
    assert (tmp_path / "run" / "state.json").exists()
    assert (tmp_path / "run" / "chat_trace.jsonl").exists()


def test_scenario_bit_identical_reports(dropper_scope, tmp_path):
    first = run_scenario(dropper_scope, tmp_path, "a")
    second = run_scenario(dropper_scope, tmp_path, "b")
    report_a = (tmp_path / "a" / "report.json").read_bytes()
    report_b = (tmp_path / "b" / "report.json").read_bytes()
    assert report_a == report_b
    assert first.report == second.report


def always_plans_more_gateway() -> Gateway:
    backend = ScriptedBackend()
    plan = json.dumps(plan_payload(
        raw_step(priority="high", objective="dig deeper into the archive")))
    backend.add(plan, role="supervisor", match="TASK: produce", repeat=True)
    backend.add(plan, role="supervisor", match="TASK: revise", repeat=True)
    backend.add(json.dumps({"action": "final", "summary": "looked once more",
                            "findings": []}), role="worker", repeat=True)
    backend.add(json.dumps(report_payload(verdict="needs_review",
                                          attack_chain=[], iocs=[])),
                role="supervisor", match="TASK: compose", repeat=True)
    return Gateway(backend, default_roles(), backoff_base_s=0.01)


def test_adversarial_planner_terminates_by_budget(tmp_path):
    scope = make_scope()
    config = AnalysisConfig(budget_total=5, wall_timeout_s=30.0,
                            run_dir=tmp_path / "adversarial")
    outcome = run_analysis(scope, config, always_plans_more_gateway(),
                           bind_tools())
    assert outcome.status == "completed"
    assert outcome.report is not None
    assert len(outcome.state_snapshot.task_log) == 5
    assert outcome.state_snapshot.budget.used == 5


def test_slow_tool_times_out_with_snapshot(tmp_path, dropper_scope):
    setup_path = next(f.path for f in dropper_scope.files
                      if f.path.endswith("setup.py"))
    replies = [
        {"role": "supervisor", "match": "TASK: produce",
         "response": plan_payload(raw_step(
             objective="decode the embedded command", priority="high",
             inputs=[f"file:{setup_path}"]))},
        # worker stalls past the deadline before answering
        {"role": "worker", "delay": 1.2,
         "response": {"action": "final", "summary": "slow answer",
                      "findings": []}},
        {"role": "supervisor", "match": "TASK: revise",
         "response": {"rationale": "", "steps": []}, "repeat": True},
    ]
    gateway = Gateway(scripted_backend_from(replies), default_roles(),
                      backoff_base_s=0.01)
    config = AnalysisConfig(wall_timeout_s=0.8, hard_cancel_grace_s=5.0,
                            run_dir=tmp_path / "slow")
    start = time.monotonic()
    outcome = run_analysis(dropper_scope, config, gateway, bind_tools())
    assert outcome.status == "timeout"
    assert outcome.wall_time >= 0.8
    assert time.monotonic() - start < 10
    assert (tmp_path / "slow" / "state.json").exists()
    outcome_doc = json.loads((tmp_path / "slow" / "outcome.json").read_text())
    assert outcome_doc["status"] == "timeout"
    assert outcome_doc["partial_results_attached"] is True


def test_unreachable_gateway_fails_with_snapshot(tmp_path):
    from pkgsleuth.gateway import HttpChatBackend
    gateway = Gateway(HttpChatBackend("http://127.0.0.1:1", timeout_s=0.2),
                      default_roles(), max_attempts=2, backoff_base_s=0.01)
    config = AnalysisConfig(wall_timeout_s=10.0, run_dir=tmp_path / "down")
    outcome = run_analysis(make_scope(), config, gateway, bind_tools())
    assert outcome.status == "failed"
    assert outcome.state_snapshot.phase == "failed"
    assert (tmp_path / "down" / "state.json").exists()


def test_sandbox_runs_use_step_directories(tmp_path, dropper_scope):
    setup_path = next(f.path for f in dropper_scope.files
                      if f.path.endswith("setup.py"))
    replies = [
        {"role": "supervisor", "match": "TASK: produce",
         "response": plan_payload(raw_step(
             objective="observe what the fragment builds", priority="high"))},
        {"role": "worker",
         "response": {"action": "tool_call", "tool": "execute_python_code",
                      "arguments": {"code": "open('made.txt','w').write('1')",
                                    "limit": 10}}},
        {"role": "worker",
         "response": {"action": "final", "summary": "executed",
                      "findings": [{"kind": "executed_output",
                                    "summary": "fragment wrote a file",
                                    "evidence": "made.txt", "cites": [0]}]}},
        {"role": "supervisor", "match": "TASK: revise",
         "response": {"rationale": "", "steps": []}},
        {"role": "supervisor", "match": "TASK: compose",
         "response": report_payload(verdict="needs_review", attack_chain=[],
                                    iocs=[])},
    ]
    gateway = Gateway(scripted_backend_from(replies), default_roles(),
                      backoff_base_s=0.01)
    run_dir = tmp_path / "sandboxed"
    toolbox = bind_tools(sandbox_base=run_dir / "sandbox")
    outcome = run_analysis(dropper_scope,
                           AnalysisConfig(run_dir=run_dir,
                                          wall_timeout_s=30.0),
                           gateway, toolbox)
    assert outcome.status == "completed"
    assert (run_dir / "sandbox" / "s1" / "made.txt").exists()
