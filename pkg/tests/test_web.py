"""Web tool tests: SSRF guard, fetching, composite intel, and search."""

from __future__ import annotations

import hashlib
import inspect as inspect_mod

import pytest

from pkgsleuth.tools.web import (FetchConfig, IntelInspector,
                                 InvalidTargetError, QuotaExceededError,
                                 ProviderUnreachableError,
                                 ScriptedIntelProvider, ScriptedSearchProvider,
                                 SsrfBlockedError, EmptyQueryError,
                                 VirusTotalClient, detect_content_kind,
                                 fetch_content_at_url, guard_url, web_search)

# --- SSRF guard --------------------------------------------------------------------

BLOCKED_LITERALS = ("http://127.0.0.1/x", "http://10.0.0.8/", "https://[::1]/",
                    "http://192.168.1.1/a", "http://169.254.169.254/meta",
                    "http://0.0.0.0/")


@pytest.mark.parametrize("url", BLOCKED_LITERALS)
def test_denylisted_literals_blocked_before_any_resolution(url):
    calls = []

    def recording_resolver(*args, **kwargs):
        calls.append(args)
        raise AssertionError("resolver must not be consulted for literals")

    with pytest.raises(SsrfBlockedError):
        guard_url(url, FetchConfig(), resolver=recording_resolver)
    assert calls == []


def test_hostname_resolving_to_private_blocked():
    def resolver(host, port, **kwargs):
        return [(2, 1, 6, "", ("10.1.2.3", port))]

    with pytest.raises(SsrfBlockedError, match="private"):
        guard_url("http://internal.example.com/", FetchConfig(),
                  resolver=resolver)


def test_public_hostname_allowed():
    def resolver(host, port, **kwargs):
        return [(2, 1, 6, "", ("93.184.216.34", port))]

    guard_url("http://example.com/", FetchConfig(), resolver=resolver)


def test_allow_hosts_bypass():
    guard_url("http://127.0.0.1:9999/x",
              FetchConfig(allow_hosts=frozenset({"127.0.0.1:9999"})))


def test_non_http_scheme_rejected():
    with pytest.raises(InvalidTargetError):
        guard_url("ftp://example.com/file", FetchConfig())


# --- fetching ----------------------------------------------------------------------

def test_fetch_small_text_body(web_server, loopback_fetch_config):
    body = b"ten bytes!"
    url = web_server.serve("/doc.txt", body, content_type="text/plain")
    result = fetch_content_at_url(url, config=loopback_fetch_config(web_server))
    assert result.status == 200
    assert result.content_kind == "text"
    assert result.body == body
    assert result.sha256 == hashlib.sha256(body).hexdigest()
    assert not result.truncated


def test_fetch_ceiling_truncates_and_drops_hash(web_server,
                                                loopback_fetch_config):
    url = web_server.serve("/big.bin", b"z" * 2048)
    result = fetch_content_at_url(url, ceiling=1024,
                                  config=loopback_fetch_config(web_server))
    assert result.truncated
    assert len(result.body) == 1024
    assert result.sha256 is None


def test_fetch_follows_redirects_with_per_hop_guard(web_server,
                                                    loopback_fetch_config):
    final = web_server.serve("/final", b"arrived")
    web_server.redirect("/hop", "/final")
    result = fetch_content_at_url(web_server.url + "/hop",
                                  config=loopback_fetch_config(web_server))
    assert result.body == b"arrived"
    assert result.url == final


def test_fetch_http_error_is_a_result(web_server, loopback_fetch_config):
    url = web_server.serve("/gone", b"missing", status=404)
    result = fetch_content_at_url(url, config=loopback_fetch_config(web_server))
    assert result.status == 404


def test_magic_bytes_beat_content_type():
    assert detect_content_kind(b"\x1f\x8b\x08rest", "text/plain") == "archive"
    assert detect_content_kind(b"MZ\x90\x00", "text/plain") == "binary"
    assert detect_content_kind(b"#!/bin/sh\n", "") == "script"
    assert detect_content_kind(b"<!DOCTYPE html><html>", "") == "html"
    assert detect_content_kind(b"plain words", "") == "text"
    assert detect_content_kind(b"\x00\x01\x02\x03" * 100, "") == "binary"


# --- composite intel ----------------------------------------------------------------

def make_inspector(provider, web_server=None, **kwargs) -> IntelInspector:
    hosts = frozenset()
    if web_server is not None:
        hosts = frozenset({f"{web_server.host}:{web_server.port}"})
    return IntelInspector(provider,
                          fetch_config=FetchConfig(allow_hosts=hosts,
                                                   timeout_s=5.0),
                          **kwargs)


def test_inspect_api_accepts_no_hash():
    signature = inspect_mod.signature(IntelInspector.inspect)
    assert list(signature.parameters) == ["self", "target"]
    assert not any("hash" in name for name in signature.parameters)


def test_domain_scenario_seven_vendors():
    provider = ScriptedIntelProvider(domains={
        "example-c2.top": {"verdict_counts": {"malicious": 7, "harmless": 60}},
    })
    report = make_inspector(provider).inspect("example-c2.top")
    assert report.target_kind == "domain"
    assert report.verdict_counts["malicious"] == 7
    assert not report.cached


def test_url_to_file_queries_file_endpoint_with_internal_hash(
        web_server, intel_server, loopback_fetch_config):
    payload = b"MZ\x90\x00" + b"fake-binary" * 20
    digest = hashlib.sha256(payload).hexdigest()
    url = web_server.serve("/drop/updater.bin", payload,
                           content_type="application/octet-stream")
    intel_server.seed_file(digest, {"malicious": 12, "harmless": 3})
    client = VirusTotalClient(intel_server.url)
    inspector = IntelInspector(client,
                               fetch_config=loopback_fetch_config(web_server))
    report = inspector.inspect(url)
    assert report.target_kind == "file"
    assert report.resolved_hash == digest
    assert report.verdict_counts["malicious"] == 12
    assert intel_server.count(f"/files/{digest}") == 1


def test_html_url_queries_url_endpoint(web_server, intel_server,
                                       loopback_fetch_config):
    url = web_server.serve("/landing", b"<html><body>hi</body></html>",
                           content_type="text/html")
    intel_server.seed_url(url, {"malicious": 2, "harmless": 20})
    inspector = IntelInspector(VirusTotalClient(intel_server.url),
                               fetch_config=loopback_fetch_config(web_server))
    report = inspector.inspect(url)
    assert report.target_kind == "url"
    assert report.resolved_hash is None
    assert report.verdict_counts["malicious"] == 2


def test_cache_suppresses_provider_calls_within_ttl():
    provider = ScriptedIntelProvider(domains={
        "cached.example": {"verdict_counts": {"malicious": 1}}})
    clock_value = [0.0]
    inspector = make_inspector(provider, cache_ttl_s=100.0,
                               clock=lambda: clock_value[0])
    first = inspector.inspect("cached.example")
    second = inspector.inspect("cached.example")
    assert not first.cached and second.cached
    assert len(provider.calls) == 1
    clock_value[0] = 101.0  # TTL expired: traffic resumes
    third = inspector.inspect("cached.example")
    assert not third.cached
    assert len(provider.calls) == 2


def test_quota_exceeded_distinct(intel_server):
    intel_server.fail_next_with.append(429)
    inspector = make_inspector(VirusTotalClient(intel_server.url))
    with pytest.raises(QuotaExceededError):
        inspector.inspect("quota.example")


def test_provider_unreachable_after_retries():
    client = VirusTotalClient("http://127.0.0.1:1", timeout_s=0.2,
                              max_attempts=2, backoff_base_s=0.01)
    inspector = make_inspector(client)
    with pytest.raises(ProviderUnreachableError):
        inspector.inspect("down.example")


def test_invalid_target_rejected():
    inspector = make_inspector(ScriptedIntelProvider())
    with pytest.raises(InvalidTargetError):
        inspector.inspect("not a domain at all")
    with pytest.raises(InvalidTargetError):
        inspector.inspect("ftp://example.com/x")


def test_unknown_target_yields_empty_counts(intel_server):
    inspector = make_inspector(VirusTotalClient(intel_server.url))
    report = inspector.inspect("unknown.example")
    assert report.verdict_counts == {}


# --- web search ---------------------------------------------------------------------

def test_search_filters_below_threshold():
    hits = ([{"title": f"t{i}", "url": f"https://s/{i}", "snippet": "s",
              "score": 0.9 - i * 0.05} for i in range(5)]
            + [{"title": f"low{i}", "url": f"https://l/{i}", "snippet": "s",
                "score": 0.2} for i in range(3)])
    provider = ScriptedSearchProvider({"query": hits})
    results = web_search("query about malware", cap=5, provider=provider)
    assert len(results.hits) == 5
    assert results.filtered_out == 3
    scores = [h.relevance_score for h in results.hits]
    assert scores == sorted(scores, reverse=True)


def test_search_renormalizes_scores_above_one():
    provider = ScriptedSearchProvider({"q": [
        {"title": "a", "url": "u", "snippet": "s", "score": 10.0},
        {"title": "b", "url": "u", "snippet": "s", "score": 2.0},
    ]})
    results = web_search("q", provider=provider)
    assert results.hits[0].relevance_score == 1.0
    assert results.filtered_out == 1  # 2/10 falls below 0.5


def test_search_empty_query_rejected():
    with pytest.raises(EmptyQueryError):
        web_search("   ", provider=ScriptedSearchProvider())


def test_search_cap_is_not_filtering():
    provider = ScriptedSearchProvider({"q": [
        {"title": f"t{i}", "url": "u", "snippet": "s", "score": 0.9}
        for i in range(8)]})
    results = web_search("q", cap=5, provider=provider)
    assert len(results.hits) == 5
    assert results.filtered_out == 0
