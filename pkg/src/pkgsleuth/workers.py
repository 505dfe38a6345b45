"""Worker agents: a bounded model/tool loop executing one objective.

Each invocation receives a focused brief, proposes tool calls one model
turn at a time, sees tool output (or the tool's diagnostic, verbatim) as
the next observation, and ends with a structured result. Hard guarantees:
at most ``inner_budget`` tool calls and ``inner_budget + 1`` model turns,
confinement to the worker's registered toolset, and a repetition detector
that cuts loops stuck on a failing call. Worker failures never raise past
the caller; they come back as ``status="failed"`` so the planner can react.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

from .gateway import (ExtractionFailedError, FieldSpec, Gateway, GatewayError,
                      RunTrace, SchemaSpec)
from .prompts import load_template
from .state import (FINDING_KINDS, Finding, ToolCall, WorkerBrief,
                    WorkerResult)
from .tools import SandboxUnavailableError, ToolError
from .tools.deobfuscation import decode_base64_payload, decrypt_fernet_payload
from .tools.sandbox import SandboxConfig, execute_python_code
from .tools.web import (FetchConfig, IntelInspector, fetch_content_at_url,
                        web_search)

logger = logging.getLogger("pkgsleuth.workers")

WORKER_TOOLSETS = {
    "deobfuscator": ("decode_base64_payload", "decrypt_fernet_payload",
                     "execute_python_code"),
    "web_researcher": ("web_search", "fetch_content_at_url",
                       "inspect_domain_or_url_using_virustotal"),
}

REPEAT_WINDOW = 3   # identical trailing calls that trip the detector
REPEAT_FAILURES = 3  # total failures of one (tool, args) pair that trip it

OBSERVATION_RENDER_CAP = 4000  # chars of one observation shown to the model

WORKER_ACTION_SCHEMA = SchemaSpec(
    description="One worker turn: a tool call or the final answer.",
    fields=(
        ("action", FieldSpec(type="string", enum=("tool_call", "final"))),
        ("tool", FieldSpec(type="string", required=False)),
        ("arguments", FieldSpec(type="object", required=False)),
        ("summary", FieldSpec(type="string", required=False)),
        ("findings", FieldSpec(
            type="array", required=False,
            items=FieldSpec(type="object", fields=(
                ("kind", FieldSpec(type="string")),
                ("summary", FieldSpec(type="string")),
                ("evidence", FieldSpec(type="string", required=False)),
                ("cites", FieldSpec(type="array", required=False)),
            )))),
    ))


# --- tool binding -----------------------------------------------------------------

class ToolContext:
    """Mutable per-analysis context the orchestrator updates before each
    dispatch (currently: which step owns the sandbox directory)."""

    def __init__(self):
        self.step_id: str | None = None


@dataclass
class Toolbox:
    by_worker: dict
    context: ToolContext

    def for_worker(self, worker: str) -> dict:
        return self.by_worker.get(worker, {})


def bind_tools(*, fetch_config: FetchConfig | None = None,
               sandbox_config: SandboxConfig | None = None,
               intel: IntelInspector | None = None,
               search_provider=None,
               search_cap: int = 5,
               relevance_threshold: float = 0.5,
               sandbox_base: str | Path | None = None) -> Toolbox:
    """Wire the deterministic tools to their configuration.

    The returned Toolbox maps each worker to its
    ``{tool_name: callable(arguments) -> observation}`` set. Observations
    are plain text for the model; tool diagnostics surface as ToolError and
    are fed back verbatim by the loop. Sandbox runs land in
    ``<sandbox_base>/<step_id>/`` when a base directory is given.
    """
    fetch_config = fetch_config or FetchConfig()
    context = ToolContext()

    def _require(args: dict, key: str) -> str:
        value = args.get(key)
        if not isinstance(value, str) or not value.strip():
            raise ToolError(f"missing or empty required argument {key!r}")
        return value

    def tool_decode_base64(args: dict) -> str:
        payload = decode_base64_payload(_require(args, "input"))
        return (f"decoded {len(payload.data)} bytes via {payload.method} "
                f"(printable ratio {payload.printable_ratio:.2f}):\n"
                f"{payload.text}")

    def tool_decrypt_fernet(args: dict) -> str:
        payload = decrypt_fernet_payload(_require(args, "token"),
                                         _require(args, "key"))
        return (f"decrypted {len(payload.data)} bytes via {payload.method} "
                f"(printable ratio {payload.printable_ratio:.2f}):\n"
                f"{payload.text}")

    def tool_execute(args: dict) -> str:
        code = _require(args, "code")
        limit = float(args.get("limit", 60.0))
        work_dir = None
        if sandbox_base is not None:
            work_dir = Path(sandbox_base) / (context.step_id or "adhoc")
        result = execute_python_code(code, limit=min(limit, 60.0),
                                     config=sandbox_config, work_dir=work_dir)
        artifact_lines = [f"- {a.path} ({a.size} bytes, sha256 {a.sha256})"
                          for a in result.artifacts]
        parts = [f"exit status: {result.exit_status} "
                 f"(wall time {result.wall_time:.2f}s)"]
        parts.append("stdout:\n" + (result.stdout or "(empty)"))
        if result.stderr:
            parts.append("stderr:\n" + result.stderr)
        parts.append("files created:\n"
                     + ("\n".join(artifact_lines) if artifact_lines else "(none)"))
        return "\n".join(parts)

    def tool_search(args: dict) -> str:
        if search_provider is None:
            raise ToolError("no web search provider is configured")
        results = web_search(_require(args, "query"), cap=search_cap,
                             provider=search_provider,
                             relevance_threshold=relevance_threshold)
        return results.describe()

    def tool_fetch(args: dict) -> str:
        url = _require(args, "url")
        return fetch_content_at_url(url, config=fetch_config).describe()

    def tool_inspect(args: dict) -> str:
        if intel is None:
            raise ToolError("no threat intelligence provider is configured")
        return intel.inspect(_require(args, "target")).describe()

    return Toolbox(by_worker={
        "deobfuscator": {
            "decode_base64_payload": tool_decode_base64,
            "decrypt_fernet_payload": tool_decrypt_fernet,
            "execute_python_code": tool_execute,
        },
        "web_researcher": {
            "web_search": tool_search,
            "fetch_content_at_url": tool_fetch,
            "inspect_domain_or_url_using_virustotal": tool_inspect,
        },
    }, context=context)


# --- repetition detection -----------------------------------------------------------

def _call_key(call: ToolCall) -> tuple[str, str]:
    return call.tool, json.dumps(call.arguments, sort_keys=True, default=str)


def detect_repetition(trace: list[ToolCall]) -> bool:
    """True when the worker is stuck: the last three calls are identical
    (tool + canonicalized arguments), or one (tool, arguments) pair has
    failed three times anywhere in the trace."""
    if len(trace) >= REPEAT_WINDOW:
        tail = [_call_key(c) for c in trace[-REPEAT_WINDOW:]]
        if len(set(tail)) == 1:
            return True
    failures: dict[tuple[str, str], int] = {}
    for call in trace:
        if call.ok:
            continue
        key = _call_key(call)
        failures[key] = failures.get(key, 0) + 1
        if failures[key] >= REPEAT_FAILURES:
            return True
    return False


# --- the worker loop ------------------------------------------------------------------

def _render_observation(index: int, call: ToolCall) -> str:
    text = call.observation
    if len(text) > OBSERVATION_RENDER_CAP:
        text = (text[:OBSERVATION_RENDER_CAP]
                + f"\n[... observation truncated at {OBSERVATION_RENDER_CAP} "
                  "chars; full output retained in the analysis record ...]")
    status = "ok" if call.ok else "error"
    return (f"Observation {index} ({call.tool}, {status}):\n{text}")


def _system_prompt(worker: str, toolset: dict,
                   prompt_dir: str | Path | None) -> str:
    template = load_template(f"{worker}/system.txt", override_dir=prompt_dir)
    tool_lines = "\n".join(f"- {name}" for name in toolset)
    return template.format(tools=tool_lines)


def _build_findings(step_id: str, raw_findings: list, trace: list[ToolCall],
                    material_refs: set[str]) -> list[Finding]:
    findings = []
    for raw in raw_findings or []:
        kind = raw.get("kind", "")
        if kind not in FINDING_KINDS:
            logger.warning("dropping finding with unknown kind %r", kind)
            continue
        cites = raw.get("cites") or []
        cited_calls = []
        cited_materials = []
        for cite in cites:
            if isinstance(cite, int) and 0 <= cite < len(trace):
                cited_calls.append(cite)
            elif isinstance(cite, str) and cite in material_refs:
                cited_materials.append(cite)
        if not cited_calls and not cited_materials:
            logger.warning("dropping uncited finding %r",
                           raw.get("summary", ""))
            continue
        evidence = {
            "detail": raw.get("evidence", ""),
            "observations": [trace[i].observation for i in cited_calls],
            "tool_calls": cited_calls,
            "materials": cited_materials,
        }
        findings.append(Finding(id="", kind=kind,
                                summary=raw.get("summary", ""),
                                evidence=evidence, source=step_id))
    return findings


def run_worker(brief: WorkerBrief, gateway: Gateway, tools: dict,
               *, trace: RunTrace | None = None,
               prompt_dir: str | Path | None = None) -> WorkerResult:
    """Execute one objective via the bounded inner loop.

    ``tools`` is the invoking worker's own ``{name: callable}`` set (e.g.
    ``toolbox.for_worker(brief.worker)``). Tool errors become observations
    (their diagnostics exist for the model); out-of-toolset requests are
    rejected but still consume inner budget; gateway failures produce
    ``status="failed"`` rather than raising.
    """
    toolset = tools
    registered = WORKER_TOOLSETS.get(brief.worker, ())
    if not registered:
        raise ValueError(f"unknown worker role {brief.worker!r}")
    if set(toolset) - set(registered):
        raise ValueError(f"tool binding for worker {brief.worker!r} exceeds "
                         f"its registered toolset {registered}")
    system = _system_prompt(brief.worker, toolset, prompt_dir)
    material_refs = {m.ref for m in brief.materials}
    conversation = [brief.render()]
    tool_trace: list[ToolCall] = []
    model_turns = 0

    def result(status: str, summary: str, findings=None, cause: str = "") -> WorkerResult:
        return WorkerResult(step_id=brief.step_id, status=status,
                            summary=summary, findings=findings or [],
                            tool_trace=tool_trace, model_turns=model_turns,
                            failure_cause=cause)

    for _turn in range(brief.inner_budget + 1):
        try:
            reply = gateway.complete("worker", system,
                                     "\n\n".join(conversation), trace=trace)
            model_turns += 1
            action = gateway.extract_structured(reply, WORKER_ACTION_SCHEMA,
                                                trace=trace)
        except ExtractionFailedError as exc:
            return result("failed", "worker reply could not be structured",
                          cause=str(exc))
        except GatewayError as exc:
            return result("failed", "model gateway failure", cause=str(exc))

        if action["action"] == "final":
            summary = (action.get("summary") or "").strip()
            findings = _build_findings(brief.step_id,
                                       action.get("findings") or [],
                                       tool_trace, material_refs)
            if not summary:
                return result("partial", "worker finished without a summary",
                              findings)
            return result("completed", summary, findings)

        if len(tool_trace) >= brief.inner_budget:
            return result("partial",
                          f"inner tool budget of {brief.inner_budget} "
                          "exhausted before a final answer")

        tool_name = action.get("tool") or ""
        arguments = action.get("arguments") or {}
        if tool_name not in toolset:
            call = ToolCall(
                tool=tool_name, arguments=arguments,
                observation=(f"tool {tool_name!r} is not available to the "
                             f"{brief.worker} worker; available tools: "
                             + ", ".join(toolset)),
                ok=False)
        else:
            try:
                observation = toolset[tool_name](arguments)
                call = ToolCall(tool=tool_name, arguments=arguments,
                                observation=observation, ok=True)
            except ToolError as exc:
                call = ToolCall(tool=tool_name, arguments=arguments,
                                observation=str(exc), ok=False)
            except SandboxUnavailableError as exc:
                return result("failed", "sandbox runtime unavailable",
                              cause=str(exc))
            except Exception as exc:  # tools must never crash the analysis
                logger.exception("unexpected tool failure in %s", tool_name)
                call = ToolCall(tool=tool_name, arguments=arguments,
                                observation=f"tool execution error: {exc}",
                                ok=False)
        tool_trace.append(call)
        conversation.append(_render_observation(len(tool_trace) - 1, call))
        if detect_repetition(tool_trace):
            return result("partial",
                          "stopped by the repetition detector: the same "
                          "call keeps failing or repeating")

    return result("partial",
                  "model turn budget exhausted before a final answer")
