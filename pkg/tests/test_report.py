"""Report model tests: validation, defanging, serialization round-trips."""

from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pkgsleuth.report import (AnalysisReport, AttackStage, IoC,
                              ReportValidationError, defang, parse_report,
                              refang, serialize_report, validate_report)


def make_report(**overrides) -> AnalysisReport:
    fields = dict(
        package_name="demo", package_version="1.0",
        verdict="malicious", confidence="high",
        threat_overview="downloads and runs a second stage",
        attack_chain=[AttackStage(stage="decodes an embedded command",
                                  evidence=["f1"])],
        iocs=[IoC.create("url", "https://bad.example/x", "f1")],
        recommendations=["quarantine the package"],
        evidence_index={"f1": "decoded_payload: encoded command"},
    )
    fields.update(overrides)
    return AnalysisReport(**fields)


# --- defanging ---------------------------------------------------------------------

def test_defang_url_example():
    assert defang("https://bad.example/x") == "hxxps://bad[.]example/x"
    assert defang("http://evil.tld/a.b") == "hxxp://evil[.]tld/a[.]b"


def test_defang_domain_ip_email():
    assert defang("cmd.evil.top") == "cmd[.]evil[.]top"
    assert defang("10.1.2.3") == "10[.]1[.]2[.]3"
    assert defang("author@mail.example") == "author@mail[.]example"


def test_defang_idempotent():
    once = defang("https://a.b/c")
    assert defang(once) == once


def test_refang_inverts_defang():
    for value in ("https://dl.files.example/payload.bin", "a.b.c",
                  "http://x.y/z?q=1.2", "user@host.tld"):
        assert refang(defang(value)) == value


@settings(max_examples=100, deadline=None)
@given(st.text(alphabet="abcxyz./:@-", min_size=1, max_size=40))
def test_defang_idempotent_property(value):
    assert defang(defang(value)) == defang(value)


# --- validation ---------------------------------------------------------------------

def test_valid_report_no_violations():
    assert validate_report(make_report()) == []


def test_benign_report_allows_empty_chain():
    report = make_report(verdict="benign", attack_chain=[], iocs=[])
    assert validate_report(report) == []


def test_malicious_requires_attack_chain():
    report = make_report(attack_chain=[])
    violations = validate_report(report)
    assert any("attack_chain is empty" in v for v in violations)


def test_dangling_evidence_violations():
    report = make_report(
        attack_chain=[AttackStage(stage="s", evidence=["f9"])],
        iocs=[IoC.create("url", "https://bad.example/x", "f7")])
    violations = validate_report(report)
    assert any("f9" in v for v in violations)
    assert any("f7" in v for v in violations)


def test_all_violations_returned_not_just_first():
    report = make_report(verdict="odd", confidence="super",
                         attack_chain=[AttackStage(stage="", evidence=["f9"])])
    assert len(validate_report(report)) >= 4


def test_undefanged_ioc_flagged():
    report = make_report(iocs=[IoC(kind="url", value="https://raw.example/",
                                   source_finding="f1")])
    assert any("not defanged" in v for v in validate_report(report))


# --- serialization ------------------------------------------------------------------

def test_human_text_sections_in_order():
    text = serialize_report(make_report(), "human_text")
    sections = ["## Final Verdict", "## Threat Overview", "## Attack Chain",
                "## Indicators of Compromise", "## Recommendations"]
    positions = [text.index(s) for s in sections]
    assert positions == sorted(positions)
    assert "MALICIOUS" in text
    assert "hxxps://bad[.]example/x" in text


def test_machine_round_trip():
    report = make_report()
    document = serialize_report(report, "machine_structured")
    assert parse_report(document) == report


def test_serialize_rejects_invalid():
    with pytest.raises(ReportValidationError):
        serialize_report(make_report(attack_chain=[]), "human_text")


def test_unknown_format_rejected():
    with pytest.raises(ValueError):
        serialize_report(make_report(), "yaml")


_ids = st.sampled_from(["f1", "f2", "f3"])


@st.composite
def reports(draw):
    verdict = draw(st.sampled_from(("malicious", "benign", "needs_review")))
    evidence_ids = draw(st.lists(_ids, min_size=1, max_size=3, unique=True))
    index = {fid: f"digest of {fid}" for fid in evidence_ids}
    chain = [AttackStage(stage=draw(st.text(alphabet="ab stage", min_size=1,
                                            max_size=20)),
                         evidence=[draw(st.sampled_from(evidence_ids))])
             for _ in range(draw(st.integers(0, 2)))]
    if verdict == "malicious" and not chain:
        chain = [AttackStage(stage="required stage",
                             evidence=[evidence_ids[0]])]
    iocs = [IoC.create(draw(st.sampled_from(("url", "domain", "email"))),
                       draw(st.sampled_from(("https://a.b/c", "x.y.z",
                                             "a@b.cd"))),
                       draw(st.sampled_from(evidence_ids)))
            for _ in range(draw(st.integers(0, 2)))]
    return AnalysisReport(
        package_name="p", package_version="1",
        verdict=verdict,
        confidence=draw(st.sampled_from(("low", "medium", "high"))),
        threat_overview=draw(st.text(max_size=60)),
        attack_chain=chain, iocs=iocs,
        recommendations=draw(st.lists(st.text(max_size=20), max_size=2)),
        evidence_index=index,
        warnings=draw(st.lists(st.text(max_size=20), max_size=2)),
    )


@settings(max_examples=80, deadline=None)
@given(reports())
def test_round_trip_identity_property(report):
    assert validate_report(report) == []
    assert parse_report(serialize_report(report, "machine_structured")) == report
