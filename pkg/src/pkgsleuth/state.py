"""Central analysis state: the single record of everything known about one
package under analysis.

Instead of accumulating chat history, the pipeline keeps source scope, the
current plan, an append-only log of executed sub-tasks, extracted findings,
and the iteration budget in one state value, and renders *focused* prompts
from it: worker briefs contain only the materials a step references, and
the supervisor context carries compact one-line summaries rather than full
transcripts. The state serializes to a self-contained checkpoint document
after every update, enabling inspection and recovery.
"""

from __future__ import annotations

import dataclasses
import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from .gateway import estimate_tokens
from .ingest import AnalysisScope, SourceFile

STATE_SCHEMA_VERSION = 1

PHASES = ("planning", "executing", "reporting", "done", "failed")
WORKER_ROLES = ("deobfuscator", "web_researcher")
PRIORITIES = ("high", "normal", "low")
FINDING_KINDS = ("decoded_payload", "suspicious_url", "threat_intel",
                 "executed_output", "metadata_signal", "code_pattern")

# Objectives say WHAT to analyze, never which tool to use; any of these
# identifiers appearing in an objective fails plan validation.
TOOL_NAME_DENYLIST = (
    "decode_base64_payload", "decrypt_fernet_payload", "execute_python_code",
    "web_search", "fetch_content_at_url", "inspect_domain_or_url_using_virustotal",
)

LOG_SUMMARY_CAP = 200  # chars per task summary line in the supervisor context
DEFAULT_WORKER_CONTEXT_TOKENS = 16384


class StateError(Exception):
    pass


class UnknownStepError(StateError):
    pass


class DanglingReferenceError(StateError):
    pass


# --- data types -----------------------------------------------------------------

@dataclass(frozen=True)
class PlanStep:
    id: str
    worker: str
    objective: str
    priority: str = "normal"
    inputs: tuple = ()


@dataclass
class Plan:
    steps: list[PlanStep] = field(default_factory=list)
    revision: int = 0
    rationale: str = ""

    def step(self, step_id: str) -> PlanStep | None:
        for s in self.steps:
            if s.id == step_id:
                return s
        return None


def validate_step(step: PlanStep) -> list[str]:
    problems = []
    if step.worker not in WORKER_ROLES:
        problems.append(f"step {step.id}: unknown worker role "
                        f"{step.worker!r}; must be one of {WORKER_ROLES}")
    if step.priority not in PRIORITIES:
        problems.append(f"step {step.id}: priority {step.priority!r} "
                        f"must be one of {PRIORITIES}")
    if not step.objective.strip():
        problems.append(f"step {step.id}: objective is empty")
    lowered = step.objective.lower()
    for tool in TOOL_NAME_DENYLIST:
        if tool in lowered:
            problems.append(
                f"step {step.id}: objective names the tool {tool!r}; "
                "objectives state what to analyze, not how")
    return problems


@dataclass(frozen=True)
class ToolCall:
    tool: str
    arguments: dict
    observation: str
    ok: bool = True


@dataclass(frozen=True)
class Finding:
    id: str
    kind: str
    summary: str
    evidence: dict
    source: str  # step id or "ingest"


@dataclass
class WorkerResult:
    step_id: str
    status: str  # completed | partial | failed
    summary: str
    findings: list[Finding] = field(default_factory=list)
    tool_trace: list[ToolCall] = field(default_factory=list)
    model_turns: int = 0
    failure_cause: str = ""


@dataclass
class TaskRecord:
    step_id: str
    worker: str
    started_at: float
    ended_at: float
    result: WorkerResult
    budget_cost: int = 1


@dataclass
class BudgetMeter:
    total: int
    used: int = 0

    @property
    def remaining(self) -> int:
        return self.total - self.used


@dataclass(frozen=True)
class BriefMaterial:
    ref: str  # "file:<path>" or "finding:<id>"
    label: str
    content: str


@dataclass
class WorkerBrief:
    worker: str
    step_id: str
    objective: str
    materials: list[BriefMaterial]
    inner_budget: int

    def render(self) -> str:
        lines = [f"Objective: {self.objective}", ""]
        if self.materials:
            lines.append("Materials:")
            for m in self.materials:
                lines.append(f"--- {m.label} ({m.ref}) ---")
                lines.append(m.content)
            lines.append("")
        else:
            lines.append("Materials: none referenced.")
        return "\n".join(lines)

    def token_estimate(self) -> int:
        return estimate_tokens(self.render())


@dataclass
class AnalysisState:
    scope: AnalysisScope
    plan: Plan
    task_log: list[TaskRecord]
    findings: list[Finding]
    budget: BudgetMeter
    phase: str

    def pending_steps(self) -> list[PlanStep]:
        return list(self.plan.steps)

    def finding(self, finding_id: str) -> Finding | None:
        for f in self.findings:
            if f.id == finding_id:
                return f
        return None


# --- construction and transitions ---------------------------------------------------

def new_state(scope: AnalysisScope, budget_total: int) -> AnalysisState:
    """Fresh state: planning phase, empty plan/log/findings, budget 0/total."""
    if not scope.files:
        raise StateError("cannot start an analysis on an empty scope")
    if budget_total < 1:
        raise StateError(f"budget_total must be >= 1, got {budget_total}")
    return AnalysisState(scope=scope, plan=Plan(), task_log=[], findings=[],
                         budget=BudgetMeter(total=budget_total), phase="planning")


def _stamp_finding(state: AnalysisState, finding: Finding) -> Finding:
    return dataclasses.replace(finding, id=f"f{len(state.findings) + 1}")


def add_finding(state: AnalysisState, kind: str, summary: str,
                evidence: dict, source: str) -> Finding:
    """Append a finding with a sequentially stamped id; returns it."""
    if kind not in FINDING_KINDS:
        raise StateError(f"unknown finding kind {kind!r}")
    finding = _stamp_finding(state, Finding(id="", kind=kind, summary=summary,
                                            evidence=evidence, source=source))
    state.findings.append(finding)
    return finding


def install_plan(state: AnalysisState, plan: Plan) -> None:
    """Adopt a revised plan; revision must strictly increase."""
    if plan.revision <= state.plan.revision:
        raise StateError(
            f"plan revision must increase: {plan.revision} <= "
            f"{state.plan.revision}")
    problems = []
    seen_ids = set()
    for step in plan.steps:
        if step.id in seen_ids:
            problems.append(f"duplicate step id {step.id}")
        seen_ids.add(step.id)
        problems.extend(validate_step(step))
    if problems:
        raise StateError("invalid plan: " + "; ".join(problems))
    state.plan = plan
    if state.phase == "planning" and plan.steps:
        state.phase = "executing"
    if not plan.steps and state.phase in ("planning", "executing"):
        state.phase = "reporting"


def apply_result(state: AnalysisState, record: TaskRecord) -> AnalysisState:
    """Fold one executed task into the state.

    Removes the step from the pending plan, appends the record to the
    append-only log, harvests the result's findings, and charges the budget.
    Budget overflow does not error: it clamps and forces the reporting
    phase, so partial results are still reported.
    """
    step = state.plan.step(record.step_id)
    if step is None:
        raise UnknownStepError(
            f"step {record.step_id!r} is not pending "
            f"(pending: {[s.id for s in state.plan.steps]})")
    if record.budget_cost < 1:
        raise StateError("budget_cost must be >= 1")
    state.plan.steps = [s for s in state.plan.steps if s.id != record.step_id]
    state.task_log.append(record)
    stamped = []
    for finding in record.result.findings:
        stamped.append(_stamp_finding(state, finding))
        state.findings.append(stamped[-1])
    record.result.findings = stamped
    state.budget.used = min(state.budget.total,
                            state.budget.used + record.budget_cost)
    if state.budget.used >= state.budget.total:
        state.phase = "reporting"
    return state


def mark_phase(state: AnalysisState, phase: str) -> None:
    if phase not in PHASES:
        raise StateError(f"unknown phase {phase!r}")
    state.phase = phase


# --- focused rendering ----------------------------------------------------------------

def _material_for(state: AnalysisState, ref: str) -> BriefMaterial:
    if ref.startswith("file:"):
        path = ref[len("file:"):]
        src = state.scope.get(path)
        if src is None:
            raise DanglingReferenceError(
                f"step references unknown scope file {path!r}")
        return BriefMaterial(ref=ref, label=f"source file {path} ({src.role})",
                             content=src.text)
    if ref.startswith("finding:"):
        fid = ref[len("finding:"):]
        finding = state.finding(fid)
        if finding is None:
            raise DanglingReferenceError(
                f"step references unknown finding {fid!r}")
        content = finding.summary + "\n" + json.dumps(
            finding.evidence, sort_keys=True, default=str, indent=None)
        return BriefMaterial(ref=ref, label=f"finding {fid} ({finding.kind})",
                             content=content)
    raise DanglingReferenceError(
        f"unrecognized input reference {ref!r}; expected 'file:<path>' or "
        "'finding:<id>'")


def _elide_middle(text: str, keep: int) -> str:
    if len(text) <= keep:
        return text
    half = max(1, (keep - 30) // 2)
    omitted = len(text) - 2 * half
    return (text[:half] + f"\n[... elided {omitted} chars ...]\n"
            + text[-half:])


def render_worker_brief(state: AnalysisState, step: PlanStep, *,
                        inner_budget: int = 6,
                        context_ceiling_tokens: int = DEFAULT_WORKER_CONTEXT_TOKENS
                        ) -> WorkerBrief:
    """Build the focused brief for one step: objective plus exactly the
    referenced materials, nothing else from the state.

    If the rendered brief would exceed the context ceiling, the largest
    material has its middle elided (repeatedly, largest-first, down to a
    500-character floor) until the brief fits.
    """
    if state.plan.step(step.id) is None:
        raise UnknownStepError(f"step {step.id!r} is not pending")
    materials = [_material_for(state, ref) for ref in step.inputs]
    brief = WorkerBrief(worker=step.worker, step_id=step.id,
                        objective=step.objective, materials=materials,
                        inner_budget=inner_budget)
    floor = 500
    while brief.token_estimate() > context_ceiling_tokens:
        largest = max(range(len(materials)),
                      key=lambda i: len(materials[i].content), default=None)
        if largest is None or len(materials[largest].content) <= floor:
            break
        shrunk = _elide_middle(materials[largest].content,
                               max(floor, len(materials[largest].content) // 2))
        materials[largest] = dataclasses.replace(materials[largest],
                                                 content=shrunk)
    return brief


def _one_line(text: str, cap: int = LOG_SUMMARY_CAP) -> str:
    flat = " ".join(text.split())
    return flat[:cap] if len(flat) > cap else flat


def render_supervisor_context(state: AnalysisState) -> str:
    """Deterministic compact context: scope, plan, log summaries, findings
    index, and the remaining budget as an explicit line."""
    lines = ["## Package scope"]
    lines.append(f"package: {state.scope.package_name} "
                 f"{state.scope.package_version}")
    for f in state.scope.files:
        lossy = " lossy-decode" if f.lossy else ""
        lines.append(f"- {f.path} ({f.role}, {f.byte_len} bytes{lossy})")
    if state.scope.unresolved_imports:
        lines.append("unresolved imports: "
                     + ", ".join(state.scope.unresolved_imports))
    lines.append("")
    lines.append(f"## Plan (revision {state.plan.revision})")
    if state.plan.steps:
        for s in state.plan.steps:
            refs = " ".join(s.inputs)
            lines.append(f"[{s.id}] ({s.priority}, {s.worker}) {s.objective}"
                         + (f" | inputs: {refs}" if refs else ""))
    else:
        lines.append("(no pending steps)")
    lines.append("")
    lines.append(f"## Executed tasks ({len(state.task_log)})")
    for rec in state.task_log:
        lines.append(f"- {rec.step_id} {rec.worker} {rec.result.status}: "
                     + _one_line(rec.result.summary))
    lines.append("")
    lines.append(f"## Findings ({len(state.findings)})")
    for f in state.findings:
        lines.append(f"- {f.id} {f.kind} (from {f.source}): "
                     + _one_line(f.summary))
    lines.append("")
    lines.append("## Budget")
    lines.append(f"budget {state.budget.used}/{state.budget.total} used; "
                 f"{state.budget.remaining} iterations remain")
    return "\n".join(lines)


# --- checkpoint serialization -------------------------------------------------------

def state_to_document(state: AnalysisState) -> dict:
    """Self-contained, schema-versioned checkpoint document."""
    return {
        "schema_version": STATE_SCHEMA_VERSION,
        "phase": state.phase,
        "budget": {"total": state.budget.total, "used": state.budget.used},
        "scope": {
            "package_name": state.scope.package_name,
            "package_version": state.scope.package_version,
            "unresolved_imports": list(state.scope.unresolved_imports),
            "dynamic_import_paths": list(state.scope.dynamic_import_paths),
            "files": [dataclasses.asdict(f) for f in state.scope.files],
        },
        "plan": {
            "revision": state.plan.revision,
            "rationale": state.plan.rationale,
            "steps": [{"id": s.id, "worker": s.worker,
                       "objective": s.objective, "priority": s.priority,
                       "inputs": list(s.inputs)} for s in state.plan.steps],
        },
        "task_log": [{
            "step_id": r.step_id, "worker": r.worker,
            "started_at": r.started_at, "ended_at": r.ended_at,
            "budget_cost": r.budget_cost,
            "result": {
                "step_id": r.result.step_id, "status": r.result.status,
                "summary": r.result.summary,
                "failure_cause": r.result.failure_cause,
                "model_turns": r.result.model_turns,
                "findings": [dataclasses.asdict(f) for f in r.result.findings],
                "tool_trace": [dataclasses.asdict(c) for c in r.result.tool_trace],
            },
        } for r in state.task_log],
        "findings": [dataclasses.asdict(f) for f in state.findings],
    }


def document_to_state(doc: dict) -> AnalysisState:
    version = doc.get("schema_version")
    if version != STATE_SCHEMA_VERSION:
        raise StateError(f"unsupported checkpoint schema_version: {version!r}")
    scope = AnalysisScope(
        files=[SourceFile(**f) for f in doc["scope"]["files"]],
        unresolved_imports=list(doc["scope"]["unresolved_imports"]),
        dynamic_import_paths=list(doc["scope"]["dynamic_import_paths"]),
        package_name=doc["scope"]["package_name"],
        package_version=doc["scope"]["package_version"],
    )
    plan = Plan(
        steps=[PlanStep(id=s["id"], worker=s["worker"],
                        objective=s["objective"], priority=s["priority"],
                        inputs=tuple(s["inputs"]))
               for s in doc["plan"]["steps"]],
        revision=doc["plan"]["revision"],
        rationale=doc["plan"]["rationale"],
    )

    def load_finding(payload: dict) -> Finding:
        return Finding(id=payload["id"], kind=payload["kind"],
                       summary=payload["summary"],
                       evidence=payload["evidence"], source=payload["source"])

    task_log = []
    for r in doc["task_log"]:
        res = r["result"]
        task_log.append(TaskRecord(
            step_id=r["step_id"], worker=r["worker"],
            started_at=r["started_at"], ended_at=r["ended_at"],
            budget_cost=r["budget_cost"],
            result=WorkerResult(
                step_id=res["step_id"], status=res["status"],
                summary=res["summary"], failure_cause=res["failure_cause"],
                model_turns=res["model_turns"],
                findings=[load_finding(f) for f in res["findings"]],
                tool_trace=[ToolCall(tool=c["tool"], arguments=c["arguments"],
                                     observation=c["observation"], ok=c["ok"])
                            for c in res["tool_trace"]],
            )))
    return AnalysisState(
        scope=scope, plan=plan, task_log=task_log,
        findings=[load_finding(f) for f in doc["findings"]],
        budget=BudgetMeter(total=doc["budget"]["total"],
                           used=doc["budget"]["used"]),
        phase=doc["phase"],
    )


_checkpoint_lock = threading.Lock()


def write_checkpoint(state: AnalysisState, path: str | Path) -> None:
    """Atomically persist the checkpoint document (tmp file + rename)."""
    path = Path(path)
    doc = state_to_document(state)
    with _checkpoint_lock:
        tmp = path.with_suffix(path.suffix + ".tmp")
        tmp.write_text(json.dumps(doc, sort_keys=True, indent=1),
                       encoding="utf-8")
        tmp.replace(path)


def read_checkpoint(path: str | Path) -> AnalysisState:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise StateError(f"cannot read checkpoint {path}: {exc}") from exc
    return document_to_state(doc)


def now() -> float:
    return time.time()
