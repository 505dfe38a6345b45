"""pkgsleuth: dissect suspicious Python package archives.

A budget-aware planning supervisor coordinates specialized worker agents
(deobfuscation, web research) over a central analysis state, using
deterministic tools for ground truth, and emits evidence-backed verdicts.
A batch harness reproduces the detection-metric accounting (recall@k with
timeout retries, fixed trial-1 precision).
"""

from .gateway import (Gateway, HttpChatBackend, ModelRole, RunTrace,
                      SchemaSpec, ScriptedBackend, default_roles)
from .ingest import (AnalysisScope, IngestLimits, PackageTree, SourceFile,
                     extract_archive, parse_local_imports, resolve_scope)
from .report import (AnalysisReport, IoC, defang, parse_report, refang,
                     serialize_report, validate_report)
from .state import (AnalysisState, BudgetMeter, Finding, Plan, PlanStep,
                    TaskRecord, WorkerBrief, WorkerResult, apply_result,
                    new_state, render_supervisor_context, render_worker_brief)
from .supervisor import (AnalysisConfig, AnalysisOutcome,
                         generate_initial_plan, revise_plan, run_analysis,
                         synthesize_report)
from .tools.deobfuscation import (DecodedPayload, decode_base64_payload,
                                  decrypt_fernet_payload)
from .tools.sandbox import ExecutionResult, SandboxConfig, execute_python_code
from .tools.web import (FetchConfig, FetchResult, IntelInspector,
                        SearchResults, ThreatReport, VirusTotalClient,
                        fetch_content_at_url, web_search)
from .workers import Toolbox, bind_tools, detect_repetition, run_worker

__version__ = "0.1.0"

__all__ = [
    "AnalysisConfig", "AnalysisOutcome", "AnalysisReport", "AnalysisScope",
    "AnalysisState", "BudgetMeter", "DecodedPayload", "ExecutionResult",
    "FetchConfig", "FetchResult", "Finding", "Gateway", "HttpChatBackend",
    "IngestLimits", "IntelInspector", "IoC", "ModelRole", "PackageTree",
    "Plan", "PlanStep", "RunTrace", "SandboxConfig", "SchemaSpec",
    "ScriptedBackend", "SearchResults", "SourceFile", "TaskRecord",
    "ThreatReport", "Toolbox", "VirusTotalClient", "WorkerBrief",
    "WorkerResult", "apply_result", "bind_tools", "decode_base64_payload",
    "decrypt_fernet_payload", "defang", "default_roles", "detect_repetition",
    "execute_python_code", "extract_archive", "fetch_content_at_url",
    "generate_initial_plan", "new_state", "parse_local_imports",
    "parse_report", "refang", "render_supervisor_context",
    "render_worker_brief", "resolve_scope", "revise_plan", "run_analysis",
    "run_worker", "serialize_report", "synthesize_report", "validate_report",
    "web_search",
]
