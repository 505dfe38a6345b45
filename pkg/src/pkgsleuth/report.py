"""Final analysis report: data model, validation, defanging, and serialization.

A report is the terminal artifact of one package analysis. It carries a
verdict, a narrative threat overview, an ordered attack chain, defanged
indicators of compromise, and an evidence index binding every claim back to
a finding id. Reports serialize to two formats: a titled human-readable text
document and a schema-versioned JSON document that round-trips losslessly.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field

REPORT_SCHEMA_VERSION = 1

VERDICTS = ("malicious", "benign", "needs_review")
CONFIDENCE_LEVELS = ("low", "medium", "high")
IOC_KINDS = ("url", "domain", "ip", "file_hash", "email")


class ReportValidationError(Exception):
    """Raised when an operation requires a valid report and gets violations."""

    def __init__(self, violations: list[str]):
        self.violations = violations
        super().__init__("report failed validation: " + "; ".join(violations))


# --- defanging -------------------------------------------------------------
#
# Network indicators are stored and emitted in a non-clickable form:
#   http:// -> hxxp://      https:// -> hxxps://      .  ->  [.]
# refang() is the exact inverse; defang() is idempotent because it refangs
# its input before applying the rewrite.

_SCHEME_DEFANG = ((re.compile(r"^https://", re.I), "hxxps://"),
                  (re.compile(r"^http://", re.I), "hxxp://"))
_SCHEME_REFANG = ((re.compile(r"^hxxps://", re.I), "https://"),
                  (re.compile(r"^hxxp://", re.I), "http://"))


def refang(value: str) -> str:
    """Restore a defanged indicator to its plain, machine-usable form."""
    out = value.replace("[.]", ".")
    for pattern, replacement in _SCHEME_REFANG:
        out = pattern.sub(replacement, out)
    return out


def defang(value: str) -> str:
    """Rewrite an indicator into its non-clickable form (idempotent)."""
    plain = refang(value)
    for pattern, replacement in _SCHEME_DEFANG:
        plain = pattern.sub(replacement, plain)
    return plain.replace(".", "[.]")


@dataclass(frozen=True)
class IoC:
    """One indicator of compromise, stored defanged.

    ``source_finding`` names the finding id whose evidence backs the value.
    """

    kind: str
    value: str
    source_finding: str

    @classmethod
    def create(cls, kind: str, value: str, source_finding: str) -> "IoC":
        """Build an IoC, normalizing ``value`` to its defanged form."""
        return cls(kind=kind, value=defang(value), source_finding=source_finding)


@dataclass
class AttackStage:
    """One step of the reconstructed attack chain with its evidence ids."""

    stage: str
    evidence: list[str] = field(default_factory=list)


@dataclass
class AnalysisReport:
    package_name: str
    package_version: str
    verdict: str
    confidence: str
    threat_overview: str
    attack_chain: list[AttackStage] = field(default_factory=list)
    iocs: list[IoC] = field(default_factory=list)
    recommendations: list[str] = field(default_factory=list)
    evidence_index: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)
    schema_version: int = REPORT_SCHEMA_VERSION


def validate_report(report: AnalysisReport) -> list[str]:
    """Check every report invariant; return the full list of violations.

    Violations are data, not exceptions: callers decide whether to reject,
    repair, or record them.
    """
    violations: list[str] = []
    if report.verdict not in VERDICTS:
        violations.append(f"verdict '{report.verdict}' not in {VERDICTS}")
    if report.confidence not in CONFIDENCE_LEVELS:
        violations.append(
            f"confidence '{report.confidence}' not in {CONFIDENCE_LEVELS}")
    if report.verdict == "malicious" and not report.attack_chain:
        violations.append("verdict is malicious but attack_chain is empty")
    for i, stage in enumerate(report.attack_chain):
        if not stage.stage.strip():
            violations.append(f"attack_chain[{i}] has an empty stage description")
        for fid in stage.evidence:
            if fid not in report.evidence_index:
                violations.append(
                    f"attack_chain[{i}] cites unknown finding id '{fid}'")
    for i, ioc in enumerate(report.iocs):
        if ioc.kind not in IOC_KINDS:
            violations.append(f"iocs[{i}] kind '{ioc.kind}' not in {IOC_KINDS}")
        if ioc.source_finding not in report.evidence_index:
            violations.append(
                f"iocs[{i}] cites unknown finding id '{ioc.source_finding}'")
        if defang(ioc.value) != ioc.value:
            violations.append(f"iocs[{i}] value is not defanged: {ioc.value!r}")
    if not isinstance(report.schema_version, int) or report.schema_version < 1:
        violations.append(f"schema_version {report.schema_version!r} invalid")
    return violations


# --- serialization ----------------------------------------------------------

def _report_to_payload(report: AnalysisReport) -> dict:
    return {
        "schema_version": report.schema_version,
        "package": {"name": report.package_name,
                    "version": report.package_version},
        "verdict": report.verdict,
        "confidence": report.confidence,
        "threat_overview": report.threat_overview,
        "attack_chain": [{"stage": s.stage, "evidence": list(s.evidence)}
                         for s in report.attack_chain],
        "iocs": [{"kind": i.kind, "value": i.value,
                  "source_finding": i.source_finding} for i in report.iocs],
        "recommendations": list(report.recommendations),
        "evidence_index": dict(report.evidence_index),
        "warnings": list(report.warnings),
    }


def _render_human_text(report: AnalysisReport) -> str:
    lines = [
        "PACKAGE ANALYSIS REPORT",
        f"Package: {report.package_name} {report.package_version}",
        "",
        "## Final Verdict",
        f"{report.verdict.upper()} (confidence: {report.confidence})",
        "",
        "## Threat Overview",
        report.threat_overview.strip() or "(none)",
        "",
        "## Attack Chain",
    ]
    if report.attack_chain:
        for n, stage in enumerate(report.attack_chain, 1):
            ev = ", ".join(stage.evidence) if stage.evidence else "-"
            lines.append(f"{n}. {stage.stage} [evidence: {ev}]")
    else:
        lines.append("(none)")
    lines += ["", "## Indicators of Compromise"]
    if report.iocs:
        for ioc in report.iocs:
            lines.append(f"- {ioc.kind}: {ioc.value} (from {ioc.source_finding})")
    else:
        lines.append("(none)")
    lines += ["", "## Recommendations"]
    if report.recommendations:
        lines += [f"- {r}" for r in report.recommendations]
    else:
        lines.append("(none)")
    lines += ["", "## Evidence Index"]
    if report.evidence_index:
        for fid in sorted(report.evidence_index):
            lines.append(f"- {fid}: {report.evidence_index[fid]}")
    else:
        lines.append("(none)")
    if report.warnings:
        lines += ["", "## Warnings"]
        lines += [f"- {w}" for w in report.warnings]
    return "\n".join(lines) + "\n"


def serialize_report(report: AnalysisReport, format: str) -> str:
    """Serialize a validated report.

    ``format`` is ``human_text`` (titled sections) or ``machine_structured``
    (sorted-key JSON). Rejects reports that fail :func:`validate_report`.
    """
    violations = validate_report(report)
    if violations:
        raise ReportValidationError(violations)
    if format == "human_text":
        return _render_human_text(report)
    if format == "machine_structured":
        return json.dumps(_report_to_payload(report), indent=2, sort_keys=True) + "\n"
    raise ValueError(f"unknown report format: {format!r}")


def parse_report(document: str) -> AnalysisReport:
    """Parse a machine_structured document back into an AnalysisReport."""
    payload = json.loads(document)
    version = payload.get("schema_version")
    if version != REPORT_SCHEMA_VERSION:
        raise ValueError(f"unsupported report schema_version: {version!r}")
    return AnalysisReport(
        package_name=payload["package"]["name"],
        package_version=payload["package"]["version"],
        verdict=payload["verdict"],
        confidence=payload["confidence"],
        threat_overview=payload["threat_overview"],
        attack_chain=[AttackStage(stage=s["stage"], evidence=list(s["evidence"]))
                      for s in payload["attack_chain"]],
        iocs=[IoC(kind=i["kind"], value=i["value"],
                  source_finding=i["source_finding"]) for i in payload["iocs"]],
        recommendations=list(payload["recommendations"]),
        evidence_index=dict(payload["evidence_index"]),
        warnings=list(payload.get("warnings", [])),
        schema_version=version,
    )
