"""Analysis orchestration: plan, dispatch, integrate, revise, report.

One analysis is one logical control thread. The orchestrator generates an
initial plan from the raw sources, dispatches one worker brief at a time,
folds each result into the state (checkpointing after every update),
revises the plan adaptively, and terminates with a verdict — bounded by an
iteration budget and a wall-clock timeout. Budget depletion triggers a
prioritized wind-down (only high-priority steps survive once less than a
quarter of the budget remains) and then reporting from partial findings,
never a hard failure.

Timeout enforcement is cooperative-first: the deadline is checked between
every model call and tool dispatch, and a hard cancel abandons the analysis
thread shortly after the deadline so a consistent snapshot (the last
checkpoint) can still be persisted.
"""

from __future__ import annotations

import hashlib
import json
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .gateway import (ExtractionFailedError, FieldSpec, Gateway, GatewayError,
                      RunTrace, SchemaSpec)
from .ingest import AnalysisScope, PackageTree
from .prompts import load_template
from .report import (AnalysisReport, AttackStage, IoC, refang,
                     serialize_report, validate_report)
from .state import (AnalysisState, Plan, PlanStep, TaskRecord, WorkerResult,
                    add_finding, apply_result, install_plan, mark_phase,
                    new_state, render_supervisor_context, render_worker_brief,
                    validate_step, write_checkpoint)
from .workers import Toolbox, run_worker

logger = logging.getLogger("pkgsleuth.supervisor")

DEFAULT_BUDGET_TOTAL = 12
DEFAULT_WALL_TIMEOUT_S = 1200.0
DEFAULT_INNER_BUDGET = 6
WIND_DOWN_FRACTION = 0.25  # of total budget: below this, high-priority only
HARD_CANCEL_GRACE_S = 30.0

_PRIORITY_ORDER = {"high": 0, "normal": 1, "low": 2}


class AnalysisFailure(Exception):
    pass


class _DeadlineExceeded(Exception):
    pass


@dataclass
class AnalysisConfig:
    budget_total: int = DEFAULT_BUDGET_TOTAL
    wall_timeout_s: float = DEFAULT_WALL_TIMEOUT_S
    inner_budget: int = DEFAULT_INNER_BUDGET
    run_dir: Path | None = None
    prompt_dir: Path | None = None
    hard_cancel_grace_s: float = HARD_CANCEL_GRACE_S


@dataclass
class AnalysisOutcome:
    status: str  # completed | timeout | failed
    report: AnalysisReport | None
    state_snapshot: AnalysisState
    wall_time: float


PLAN_SCHEMA = SchemaSpec(
    description="An ordered analysis plan of high-level worker tasks.",
    fields=(
        ("rationale", FieldSpec(type="string", required=False)),
        ("steps", FieldSpec(type="array", items=FieldSpec(
            type="object", fields=(
                ("worker", FieldSpec(type="string")),
                ("objective", FieldSpec(type="string")),
                ("priority", FieldSpec(type="string", required=False)),
                ("inputs", FieldSpec(type="array", required=False,
                                     items=FieldSpec(type="string"))),
            )))),
    ))

REPORT_SCHEMA = SchemaSpec(
    description="The final package analysis report.",
    fields=(
        ("verdict", FieldSpec(type="string",
                              enum=("malicious", "benign", "needs_review"))),
        ("confidence", FieldSpec(type="string",
                                 enum=("low", "medium", "high"))),
        ("threat_overview", FieldSpec(type="string")),
        ("attack_chain", FieldSpec(type="array", required=False,
                                   items=FieldSpec(type="object", fields=(
                                       ("stage", FieldSpec(type="string")),
                                       ("evidence", FieldSpec(
                                           type="array", required=False,
                                           items=FieldSpec(type="string"))),
                                   )))),
        ("iocs", FieldSpec(type="array", required=False,
                           items=FieldSpec(type="object", fields=(
                               ("kind", FieldSpec(type="string")),
                               ("value", FieldSpec(type="string")),
                               ("source_finding", FieldSpec(type="string",
                                                            required=False)),
                           )))),
        ("recommendations", FieldSpec(type="array", required=False,
                                      items=FieldSpec(type="string"))),
    ))


# --- plan handling -----------------------------------------------------------------

def _normalize_input_ref(ref: str, state: AnalysisState) -> str | None:
    """Map a model-supplied input reference to a canonical one, or None."""
    if ref.startswith("file:"):
        return ref if state.scope.get(ref[5:]) else None
    if ref.startswith("finding:"):
        return ref if state.finding(ref[8:]) else None
    if state.scope.get(ref):
        return f"file:{ref}"
    if state.finding(ref):
        return f"finding:{ref}"
    return None


def _steps_from_payload(payload: dict, state: AnalysisState,
                        next_ordinal: int) -> tuple[list[PlanStep], list[str]]:
    steps: list[PlanStep] = []
    problems: list[str] = []
    for i, raw in enumerate(payload.get("steps", [])):
        inputs = []
        for ref in raw.get("inputs", []) or []:
            canonical = _normalize_input_ref(str(ref), state)
            if canonical:
                inputs.append(canonical)
            else:
                logger.warning("dropping unknown plan input reference %r", ref)
        step = PlanStep(id=f"s{next_ordinal + i}",
                        worker=str(raw.get("worker", "")),
                        objective=str(raw.get("objective", "")),
                        priority=str(raw.get("priority") or "normal"),
                        inputs=tuple(inputs))
        problems.extend(validate_step(step))
        steps.append(step)
    return steps, problems


class _StepCounter:
    def __init__(self, start: int = 1):
        self.next = start

    def take(self, n: int) -> int:
        first = self.next
        self.next += n
        return first


def _request_plan(state: AnalysisState, gateway: Gateway, template: str,
                  variables: dict, counter: _StepCounter,
                  trace: RunTrace | None,
                  prompt_dir: Path | None) -> Plan:
    """Ask the supervisor model for a plan; one validation-guided re-prompt."""
    system = load_template("supervisor/system.txt", override_dir=prompt_dir)
    user = load_template(template, override_dir=prompt_dir).format(**variables)
    attempts = 0
    diagnostics: list[str] = []
    while attempts < 2:
        prompt = user
        if diagnostics:
            prompt += ("\n\nYour previous plan was rejected, fix these "
                       "problems:\n- " + "\n- ".join(diagnostics))
        reply = gateway.complete("supervisor", system, prompt, trace=trace)
        payload = gateway.extract_structured(reply, PLAN_SCHEMA, trace=trace)
        steps, problems = _steps_from_payload(payload, state, counter.next)
        if not problems:
            counter.take(len(steps))
            return Plan(steps=steps, revision=state.plan.revision + 1,
                        rationale=str(payload.get("rationale", "")))
        diagnostics = problems
        attempts += 1
    raise AnalysisFailure("plan rejected twice by validation: "
                          + "; ".join(diagnostics))


def _sources_blob(state: AnalysisState) -> str:
    parts = []
    for f in state.scope.files:
        parts.append(f"--- {f.path} ({f.role}) ---\n{f.text}")
    return "\n\n".join(parts)


def generate_initial_plan(state: AnalysisState, gateway: Gateway,
                          *, counter: _StepCounter | None = None,
                          trace: RunTrace | None = None,
                          prompt_dir: Path | None = None) -> Plan:
    """First plan, straight from raw sources; revision 1."""
    if state.phase != "planning":
        raise AnalysisFailure(f"cannot plan from phase {state.phase!r}")
    counter = counter or _StepCounter()
    return _request_plan(
        state, gateway, "supervisor/initial_plan.txt",
        {"context": render_supervisor_context(state),
         "sources": _sources_blob(state)},
        counter, trace, prompt_dir)


def _describe_result(result: WorkerResult) -> str:
    lines = [f"step {result.step_id} -> {result.status}: {result.summary}"]
    if result.failure_cause:
        lines.append(f"failure cause: {result.failure_cause}")
    for f in result.findings:
        lines.append(f"new finding {f.id} ({f.kind}): {f.summary}")
    if not result.findings:
        lines.append("(no new findings)")
    return "\n".join(lines)


def _counter_from_state(state: AnalysisState) -> _StepCounter:
    ordinals = [0]
    for sid in ([r.step_id for r in state.task_log]
                + [s.id for s in state.plan.steps]):
        if sid.startswith("s") and sid[1:].isdigit():
            ordinals.append(int(sid[1:]))
    return _StepCounter(start=max(ordinals) + 1)


def revise_plan(state: AnalysisState, last_result: WorkerResult,
                gateway: Gateway, *, counter: _StepCounter | None = None,
                trace: RunTrace | None = None,
                prompt_dir: Path | None = None) -> Plan:
    """Adaptive replanning after a worker result.

    When less than a quarter of the budget remains, only high-priority
    steps survive the revision (budget-aware wind-down).
    """
    counter = counter or _counter_from_state(state)
    plan = _request_plan(
        state, gateway, "supervisor/revise_plan.txt",
        {"context": render_supervisor_context(state),
         "last_result": _describe_result(last_result)},
        counter, trace, prompt_dir)
    if state.budget.remaining <= WIND_DOWN_FRACTION * state.budget.total:
        survivors = [s for s in plan.steps if s.priority == "high"]
        if len(survivors) != len(plan.steps):
            logger.info("budget wind-down: keeping %d/%d high-priority steps",
                        len(survivors), len(plan.steps))
        plan.steps = survivors
    return plan


# --- report synthesis ----------------------------------------------------------------

def _evidence_digest(finding) -> str:
    blob = json.dumps(finding.evidence, sort_keys=True, default=str)
    short_hash = hashlib.sha256(blob.encode()).hexdigest()[:12]
    summary = " ".join(finding.summary.split())[:120]
    return f"{finding.kind}: {summary} [sha256:{short_hash}]"


def _findings_blob(state: AnalysisState) -> str:
    parts = []
    for f in state.findings:
        evidence = json.dumps(f.evidence, sort_keys=True, default=str)
        if len(evidence) > 4000:
            evidence = evidence[:4000] + "...[truncated]"
        parts.append(f"[{f.id}] kind={f.kind} source={f.source}\n"
                     f"summary: {f.summary}\nevidence: {evidence}")
    return "\n\n".join(parts) if parts else "(no findings were collected)"


def _evidence_corpus(state: AnalysisState) -> dict[str, str]:
    return {f.id: (f.summary + "\n"
                   + json.dumps(f.evidence, sort_keys=True, default=str))
            for f in state.findings}


def _ground_iocs(raw_iocs: list, state: AnalysisState,
                 warnings: list[str]) -> list[IoC]:
    """Keep only IoCs whose value literally appears in some finding's
    evidence; repair the source_finding attribution when needed."""
    corpus = _evidence_corpus(state)
    grounded = []
    for raw in raw_iocs or []:
        kind = str(raw.get("kind", ""))
        value = str(raw.get("value", ""))
        claimed = str(raw.get("source_finding", ""))
        plain = refang(value)
        source = None
        if claimed in corpus and plain in refang(corpus[claimed]):
            source = claimed
        else:
            for fid, text in corpus.items():
                if plain in refang(text):
                    source = fid
                    break
        if source is None:
            warnings.append(
                f"dropped ungrounded IoC {kind}={value!r}: value does not "
                "appear in any finding's evidence")
            continue
        grounded.append(IoC.create(kind=kind, value=plain,
                                   source_finding=source))
    return grounded


def _fallback_report(state: AnalysisState, warnings: list[str]) -> AnalysisReport:
    """Deterministic report assembled directly from findings when the model
    cannot produce a schema-valid one."""
    overview_lines = ["Automatic synthesis failed; assembled from findings:"]
    overview_lines += [f"- {f.id} ({f.kind}): {f.summary}"
                       for f in state.findings] or ["- no findings collected"]
    return AnalysisReport(
        package_name=state.scope.package_name,
        package_version=state.scope.package_version,
        verdict="needs_review",
        confidence="low",
        threat_overview="\n".join(overview_lines),
        attack_chain=[],
        iocs=[],
        recommendations=["Review the collected findings manually."],
        evidence_index={f.id: _evidence_digest(f) for f in state.findings},
        warnings=warnings + ["report synthesized by deterministic fallback"],
    )


def synthesize_report(state: AnalysisState, gateway: Gateway,
                      *, trace: RunTrace | None = None,
                      prompt_dir: Path | None = None) -> AnalysisReport:
    """Compose the final report from findings, with an anti-hallucination
    gate: IoCs not present in the evidence are dropped (with a warning) and
    attack-chain citations must resolve. Unrepairable schema failures fall
    back to a deterministic needs_review report."""
    if state.phase != "reporting":
        raise AnalysisFailure(f"cannot report from phase {state.phase!r}")
    system = load_template("supervisor/system.txt", override_dir=prompt_dir)
    user = load_template("supervisor/report.txt",
                         override_dir=prompt_dir).format(
        context=render_supervisor_context(state),
        findings=_findings_blob(state))
    warnings: list[str] = []
    evidence_index = {f.id: _evidence_digest(f) for f in state.findings}
    payload = None
    diagnostics: list[str] = []
    for _attempt in range(2):
        prompt = user
        if diagnostics:
            prompt += ("\n\nYour previous report was rejected, fix these "
                       "problems:\n- " + "\n- ".join(diagnostics))
        try:
            reply = gateway.complete("supervisor", system, prompt, trace=trace)
            candidate = gateway.extract_structured(reply, REPORT_SCHEMA,
                                                   trace=trace)
        except (ExtractionFailedError, GatewayError) as exc:
            warnings.append(f"report synthesis problem: {exc}")
            continue
        chain = []
        for raw_stage in candidate.get("attack_chain", []) or []:
            evidence = [fid for fid in (raw_stage.get("evidence") or [])
                        if fid in evidence_index]
            chain.append(AttackStage(stage=str(raw_stage.get("stage", "")),
                                     evidence=evidence))
        report = AnalysisReport(
            package_name=state.scope.package_name,
            package_version=state.scope.package_version,
            verdict=candidate["verdict"],
            confidence=candidate["confidence"],
            threat_overview=candidate["threat_overview"],
            attack_chain=chain,
            iocs=_ground_iocs(candidate.get("iocs", []), state, warnings),
            recommendations=[str(r) for r in
                             candidate.get("recommendations", []) or []],
            evidence_index=evidence_index,
            warnings=warnings,
        )
        violations = validate_report(report)
        if not violations:
            return report
        diagnostics = violations
        payload = report
    logger.warning("falling back to deterministic report (last payload: %s)",
                   "present" if payload else "none")
    return _fallback_report(state, warnings)


# --- the full analysis -----------------------------------------------------------------

def seed_ingest_findings(state: AnalysisState,
                         tree: PackageTree | None = None) -> None:
    """Surface ingest-time signals as findings with source="ingest"."""
    if state.scope.dynamic_import_paths:
        add_finding(state, "code_pattern",
                    "dynamic import constructs present (not statically "
                    "resolvable); worth semantic investigation",
                    {"paths": list(state.scope.dynamic_import_paths)},
                    "ingest")
    lossy = [f.path for f in state.scope.files if f.lossy]
    if lossy:
        add_finding(state, "metadata_signal",
                    "source files did not decode cleanly as UTF-8 "
                    "(replacement characters substituted)",
                    {"paths": lossy}, "ingest")
    if state.scope.unresolved_imports:
        add_finding(state, "metadata_signal",
                    "imports referenced by __init__.py were not found in "
                    "the archive",
                    {"names": list(state.scope.unresolved_imports)}, "ingest")
    if tree is not None:
        opaque = sorted(p for p in tree.files if not p.endswith(".py"))
        if opaque:
            add_finding(state, "metadata_signal",
                        "archive contains non-Python files (passed through "
                        "unanalyzed)",
                        {"paths": opaque[:20], "total": len(opaque)}, "ingest")


def _next_step(plan: Plan) -> PlanStep:
    return sorted(plan.steps,
                  key=lambda s: _PRIORITY_ORDER.get(s.priority, 1))[0]


class _RunDirectory:
    """Filesystem side of one analysis: checkpoints, traces, reports."""

    def __init__(self, root: Path | None):
        self.root = root
        if root:
            root.mkdir(parents=True, exist_ok=True)
            (root / "sandbox").mkdir(exist_ok=True)

    @property
    def sandbox_base(self) -> Path | None:
        return self.root / "sandbox" if self.root else None

    def chat_trace(self) -> RunTrace:
        return RunTrace(self.root / "chat_trace.jsonl" if self.root else None)

    def checkpoint(self, state: AnalysisState) -> None:
        if self.root:
            write_checkpoint(state, self.root / "state.json")

    def append_tool_trace(self, record: TaskRecord) -> None:
        if not self.root:
            return
        with (self.root / "tool_trace.jsonl").open("a", encoding="utf-8") as fh:
            for call in record.result.tool_trace:
                fh.write(json.dumps(
                    {"step_id": record.step_id, "tool": call.tool,
                     "arguments": call.arguments, "ok": call.ok,
                     "observation": call.observation}, sort_keys=True) + "\n")

    def write_report(self, report: AnalysisReport) -> None:
        if not self.root:
            return
        (self.root / "report.txt").write_text(
            serialize_report(report, "human_text"), encoding="utf-8")
        (self.root / "report.json").write_text(
            serialize_report(report, "machine_structured"), encoding="utf-8")

    def write_outcome(self, status: str, wall_time: float,
                      verdict: str | None) -> None:
        if not self.root:
            return
        (self.root / "outcome.json").write_text(json.dumps(
            {"status": status, "wall_time_s": round(wall_time, 3),
             "verdict": verdict, "partial_results_attached":
                 status in ("timeout", "failed")},
            sort_keys=True, indent=1), encoding="utf-8")


class _AnalysisSession:
    def __init__(self, scope: AnalysisScope, config: AnalysisConfig,
                 gateway: Gateway, toolbox: Toolbox,
                 tree: PackageTree | None):
        self.config = config
        self.gateway = gateway
        self.toolbox = toolbox
        self.run_dir = _RunDirectory(config.run_dir)
        self.trace = self.run_dir.chat_trace()
        self.state = new_state(scope, config.budget_total)
        seed_ingest_findings(self.state, tree)
        self.counter = _StepCounter()
        self.started = time.monotonic()
        self.deadline = self.started + config.wall_timeout_s
        self.outcome: AnalysisOutcome | None = None

    def _check_deadline(self) -> None:
        if time.monotonic() >= self.deadline:
            raise _DeadlineExceeded()

    def _worker_ceiling(self) -> int:
        # leave half the worker window for the system prompt + observations
        return max(1024, self.gateway.roles["worker"].context_ceiling // 2)

    def run_loop(self) -> None:
        try:
            self.run_dir.checkpoint(self.state)
            plan = generate_initial_plan(self.state, self.gateway,
                                         counter=self.counter,
                                         trace=self.trace,
                                         prompt_dir=self.config.prompt_dir)
            install_plan(self.state, plan)
            self.run_dir.checkpoint(self.state)
            while self.state.phase == "executing" and self.state.plan.steps:
                self._check_deadline()
                step = _next_step(self.state.plan)
                self.toolbox.context.step_id = step.id
                brief = render_worker_brief(
                    self.state, step, inner_budget=self.config.inner_budget,
                    context_ceiling_tokens=self._worker_ceiling())
                started_at = time.time()
                result = run_worker(brief, self.gateway,
                                    self.toolbox.for_worker(step.worker),
                                    trace=self.trace,
                                    prompt_dir=self.config.prompt_dir)
                record = TaskRecord(step_id=step.id, worker=step.worker,
                                    started_at=started_at,
                                    ended_at=time.time(), result=result,
                                    budget_cost=1)
                apply_result(self.state, record)
                self.run_dir.checkpoint(self.state)
                self.run_dir.append_tool_trace(record)
                if self.state.phase != "executing":
                    break
                self._check_deadline()
                plan = revise_plan(self.state, result, self.gateway,
                                   counter=self.counter, trace=self.trace,
                                   prompt_dir=self.config.prompt_dir)
                install_plan(self.state, plan)
                self.run_dir.checkpoint(self.state)
            if self.state.phase in ("planning", "executing"):
                mark_phase(self.state, "reporting")
                self.run_dir.checkpoint(self.state)
            self._check_deadline()
            report = synthesize_report(self.state, self.gateway,
                                       trace=self.trace,
                                       prompt_dir=self.config.prompt_dir)
            mark_phase(self.state, "done")
            self.run_dir.checkpoint(self.state)
            self.run_dir.write_report(report)
            wall = time.monotonic() - self.started
            self.run_dir.write_outcome("completed", wall, report.verdict)
            self.outcome = AnalysisOutcome(status="completed", report=report,
                                           state_snapshot=self.state,
                                           wall_time=wall)
        except _DeadlineExceeded:
            wall = time.monotonic() - self.started
            self.run_dir.checkpoint(self.state)
            self.run_dir.write_outcome("timeout", wall, None)
            self.outcome = AnalysisOutcome(status="timeout", report=None,
                                           state_snapshot=self.state,
                                           wall_time=wall)
        except (AnalysisFailure, GatewayError) as exc:
            logger.error("analysis failed: %s", exc)
            wall = time.monotonic() - self.started
            mark_phase(self.state, "failed")
            self.run_dir.checkpoint(self.state)
            self.run_dir.write_outcome("failed", wall, None)
            self.outcome = AnalysisOutcome(status="failed", report=None,
                                           state_snapshot=self.state,
                                           wall_time=wall)


def run_analysis(scope: AnalysisScope, config: AnalysisConfig,
                 gateway: Gateway, toolbox: Toolbox,
                 tree: PackageTree | None = None) -> AnalysisOutcome:
    """Run one full analysis within the iteration budget and wall timeout.

    Returns completed (with a report), timeout (snapshot persisted, partial
    results attached), or failed (unrecoverable gateway/planning error).
    """
    session = _AnalysisSession(scope, config, gateway, toolbox, tree)
    thread = threading.Thread(target=session.run_loop, daemon=True,
                              name="pkgsleuth-analysis")
    thread.start()
    thread.join(config.wall_timeout_s + config.hard_cancel_grace_s)
    if thread.is_alive():
        # hard cancel: abandon the loop thread, report from the last
        # checkpoint so the snapshot is consistent
        logger.error("hard cancel: analysis still running %.0fs past the "
                     "deadline", config.hard_cancel_grace_s)
        wall = time.monotonic() - session.started
        session.run_dir.write_outcome("timeout", wall, None)
        return AnalysisOutcome(status="timeout", report=None,
                               state_snapshot=session.state, wall_time=wall)
    if session.outcome is None:  # loop thread died unexpectedly
        wall = time.monotonic() - session.started
        session.run_dir.write_outcome("failed", wall, None)
        return AnalysisOutcome(status="failed", report=None,
                               state_snapshot=session.state, wall_time=wall)
    return session.outcome
