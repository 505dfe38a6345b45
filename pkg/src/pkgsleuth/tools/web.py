"""Web investigation tools: guarded URL fetching, composite threat-intel
inspection, and relevance-filtered search.

The intel inspector is deliberately composite: when a target URL serves a
downloadable file it fetches the bytes, computes the sha256 itself, and
queries the provider's file endpoint by that hash. The tool API accepts no
caller-supplied hash, so a hash can never originate from the model layer.
"""

from __future__ import annotations

import base64
import hashlib
import ipaddress
import json
import logging
import re
import socket
import threading
import time
from dataclasses import dataclass, field, replace
from urllib.parse import urljoin, urlsplit

import requests

from . import ToolError

logger = logging.getLogger("pkgsleuth.web")

DEFAULT_FETCH_CEILING = 1024 * 1024


class SsrfBlockedError(ToolError):
    pass


class InvalidTargetError(ToolError):
    pass


class FetchFailedError(ToolError):
    """DNS, connect, or TLS level failure (an HTTP error status is not a
    failure: the status itself is intelligence and comes back as a result)."""


class ProviderUnreachableError(ToolError):
    pass


class QuotaExceededError(ToolError):
    """Provider quota exhausted; surfaced distinctly so the planner can
    deprioritize intel tasks instead of retrying into a wall."""


class EmptyQueryError(ToolError):
    pass


# --- SSRF guard ----------------------------------------------------------------

@dataclass(frozen=True)
class FetchConfig:
    ceiling_bytes: int = DEFAULT_FETCH_CEILING
    max_redirects: int = 5
    timeout_s: float = 10.0
    allow_hosts: frozenset = frozenset()  # "host" or "host:port" guard bypass
    deny_networks: tuple = ()  # extra CIDR strings joining the builtin denylist
    user_agent: str = "pkgsleuth-fetch/0.1"


def _address_blocked(ip: ipaddress.IPv4Address | ipaddress.IPv6Address,
                     extra_networks: tuple) -> str | None:
    if ip.is_loopback:
        return "loopback"
    if ip.is_link_local:
        return "link-local"
    if ip.is_private:
        return "private"
    if ip.is_reserved or ip.is_multicast or ip.is_unspecified:
        return "reserved"
    for cidr in extra_networks:
        if ip in ipaddress.ip_network(cidr):
            return f"denylisted network {cidr}"
    return None


def guard_url(url: str, config: FetchConfig,
              resolver=socket.getaddrinfo) -> None:
    """Refuse URLs that would touch private/loopback/link-local addresses.

    Runs before any socket is opened; ``resolver`` is injectable so tests
    can prove no resolution side effects occur for denied literals.
    """
    parts = urlsplit(url)
    if parts.scheme not in ("http", "https"):
        raise InvalidTargetError(
            f"unsupported URL scheme {parts.scheme!r}; only http and https "
            "are fetchable")
    host = parts.hostname
    if not host:
        raise InvalidTargetError(f"URL has no host: {url!r}")
    port = parts.port or (443 if parts.scheme == "https" else 80)
    if host in config.allow_hosts or f"{host}:{port}" in config.allow_hosts:
        return
    try:
        literal = ipaddress.ip_address(host)
    except ValueError:
        literal = None
    if literal is not None:
        reason = _address_blocked(literal, config.deny_networks)
        if reason:
            raise SsrfBlockedError(
                f"refusing to fetch {url!r}: address {host} is {reason}")
        return
    try:
        infos = resolver(host, port, proto=socket.IPPROTO_TCP)
    except OSError as exc:
        raise FetchFailedError(f"DNS resolution failed for {host!r}: {exc}") from exc
    for info in infos:
        addr = info[4][0]
        try:
            resolved = ipaddress.ip_address(addr)
        except ValueError:
            continue
        reason = _address_blocked(resolved, config.deny_networks)
        if reason:
            raise SsrfBlockedError(
                f"refusing to fetch {url!r}: {host} resolves to {addr} "
                f"which is {reason}")


# --- fetching --------------------------------------------------------------------

@dataclass(frozen=True)
class FetchResult:
    url: str  # final URL after redirects
    status: int
    content_kind: str  # text | script | archive | binary | html
    body: bytes
    truncated: bool
    sha256: str | None  # digest of the untruncated stream; absent if truncated

    def describe(self) -> str:
        head = self.body[:200].decode("utf-8", errors="replace")
        hash_part = f" sha256={self.sha256}" if self.sha256 else ""
        trunc = " (truncated)" if self.truncated else ""
        return (f"HTTP {self.status} {self.content_kind} "
                f"{len(self.body)} bytes{trunc}{hash_part} from {self.url}\n"
                f"body head: {head!r}")


_MAGIC_KINDS = (
    (b"\x1f\x8b", "archive"),       # gzip
    (b"PK\x03\x04", "archive"),     # zip
    (b"PK\x05\x06", "archive"),
    (b"7z\xbc\xaf", "archive"),
    (b"\x7fELF", "binary"),
    (b"MZ", "binary"),              # PE
    (b"\xcf\xfa\xed\xfe", "binary"),  # Mach-O
    (b"#!", "script"),
)

_HTML_RE = re.compile(rb"^\s*<(?:!doctype\s+html|html)", re.I)
_SCRIPT_CONTENT_TYPES = ("python", "x-sh", "shellscript", "javascript",
                         "powershell", "x-bat")


def detect_content_kind(body: bytes, content_type: str = "") -> str:
    """Classify fetched bytes: magic bytes first, declared type second."""
    for magic, kind in _MAGIC_KINDS:
        if body.startswith(magic):
            return kind
    if _HTML_RE.match(body):
        return "html"
    ct = content_type.lower()
    if "html" in ct:
        return "html"
    if any(tag in ct for tag in _SCRIPT_CONTENT_TYPES):
        return "script"
    if body:
        sample = body[:4096]
        printable = sum(1 for b in sample if 32 <= b < 127 or b in (9, 10, 13))
        if printable / len(sample) < 0.8:
            return "binary"
    return "text"


def fetch_content_at_url(url: str, ceiling: int | None = None, *,
                         config: FetchConfig | None = None,
                         session: requests.Session | None = None,
                         resolver=socket.getaddrinfo) -> FetchResult:
    """Fetch a URL with redirect re-guarding, a body ceiling, and format
    detection.

    The sha256 of the full stream is computed only when the body fits under
    the ceiling; a truncated body carries no hash (a partial-stream hash
    would be misleading intelligence). HTTP error statuses are results.
    """
    config = config or FetchConfig()
    if ceiling is None:
        ceiling = config.ceiling_bytes
    session = session or requests.Session()
    current = url
    response = None
    for _hop in range(config.max_redirects + 1):
        guard_url(current, config, resolver=resolver)
        try:
            response = session.get(
                current, stream=True, allow_redirects=False,
                timeout=config.timeout_s,
                headers={"User-Agent": config.user_agent})
        except requests.RequestException as exc:
            raise FetchFailedError(f"fetch of {current!r} failed: {exc}") from exc
        if response.status_code in (301, 302, 303, 307, 308):
            location = response.headers.get("Location")
            response.close()
            if not location:
                break
            current = urljoin(current, location)
            continue
        break
    else:
        raise FetchFailedError(
            f"too many redirects (> {config.max_redirects}) fetching {url!r}")

    digest = hashlib.sha256()
    chunks: list[bytes] = []
    received = 0
    truncated = False
    for chunk in response.iter_content(chunk_size=65536):
        digest.update(chunk)
        if received < ceiling:
            keep = chunk[: ceiling - received]
            chunks.append(keep)
        received += len(chunk)
        if received > ceiling:
            truncated = True
            break
    response.close()
    body = b"".join(chunks)
    kind = detect_content_kind(body, response.headers.get("Content-Type", ""))
    return FetchResult(
        url=current,
        status=response.status_code,
        content_kind=kind,
        body=body,
        truncated=truncated,
        sha256=None if truncated else digest.hexdigest(),
    )


# --- threat intelligence ----------------------------------------------------------

@dataclass(frozen=True)
class ThreatReport:
    target: str
    target_kind: str  # domain | url | file
    verdict_counts: dict
    first_seen: str | None
    last_seen: str | None
    resolved_hash: str | None
    provider: str
    cached: bool
    raw: dict = field(default_factory=dict)

    def describe(self) -> str:
        counts = ", ".join(f"{k}={v}" for k, v in
                           sorted(self.verdict_counts.items())) or "no data"
        hash_part = (f"; file sha256={self.resolved_hash}"
                     if self.resolved_hash else "")
        seen = ""
        if self.first_seen or self.last_seen:
            seen = f"; seen {self.first_seen or '?'} to {self.last_seen or '?'}"
        return (f"threat intel for {self.target} ({self.target_kind}) from "
                f"{self.provider}: {counts}{hash_part}{seen}")


class VirusTotalClient:
    """Client for a VirusTotal-v3-compatible intel endpoint.

    ``base_url`` points at the real service or at the mock server shipped in
    ``pkgsleuth.mocknet`` (which speaks the same minimal dialect).
    """

    def __init__(self, base_url: str, api_key: str = "", timeout_s: float = 10.0,
                 max_attempts: int = 3, backoff_base_s: float = 0.2,
                 session: requests.Session | None = None,
                 provider_id: str = "virustotal"):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout_s = timeout_s
        self.max_attempts = max_attempts
        self.backoff_base_s = backoff_base_s
        self.provider_id = provider_id
        self._session = session or requests.Session()

    def _get(self, path: str) -> dict:
        headers = {"x-apikey": self.api_key} if self.api_key else {}
        last: Exception | None = None
        for attempt in range(1, self.max_attempts + 1):
            try:
                resp = self._session.get(f"{self.base_url}{path}",
                                         headers=headers,
                                         timeout=self.timeout_s)
            except requests.RequestException as exc:
                last = exc
                if attempt < self.max_attempts:
                    time.sleep(self.backoff_base_s * 2 ** (attempt - 1))
                continue
            if resp.status_code == 429:
                raise QuotaExceededError(
                    "intel provider quota exceeded (HTTP 429); intel tasks "
                    "should be deprioritized")
            if resp.status_code == 404:
                return {}
            if resp.status_code >= 500:
                last = ProviderUnreachableError(
                    f"intel provider returned HTTP {resp.status_code}")
                if attempt < self.max_attempts:
                    time.sleep(self.backoff_base_s * 2 ** (attempt - 1))
                continue
            if resp.status_code >= 400:
                raise InvalidTargetError(
                    f"intel provider rejected the request: HTTP "
                    f"{resp.status_code}: {resp.text[:300]}")
            return resp.json()
        raise ProviderUnreachableError(
            f"intel provider unreachable after {self.max_attempts} attempts: "
            f"{last}")

    @staticmethod
    def _normalize(payload: dict) -> dict:
        attributes = payload.get("data", {}).get("attributes", {})
        return {
            "verdict_counts": dict(attributes.get("last_analysis_stats", {})),
            "first_seen": attributes.get("first_submission_date"),
            "last_seen": attributes.get("last_analysis_date"),
            "raw": payload,
        }

    def lookup_domain(self, domain: str) -> dict:
        return self._normalize(self._get(f"/domains/{domain}"))

    def lookup_url(self, url: str) -> dict:
        url_id = base64.urlsafe_b64encode(url.encode()).decode().rstrip("=")
        return self._normalize(self._get(f"/urls/{url_id}"))

    def lookup_file(self, sha256: str) -> dict:
        return self._normalize(self._get(f"/files/{sha256}"))


class ScriptedIntelProvider:
    """In-process provider for unit tests: canned normalized answers."""

    def __init__(self, domains: dict | None = None, urls: dict | None = None,
                 files: dict | None = None, provider_id: str = "scripted"):
        self.domains = domains or {}
        self.urls = urls or {}
        self.files = files or {}
        self.provider_id = provider_id
        self.calls: list[tuple[str, str]] = []

    @staticmethod
    def _answer(table: dict, key: str) -> dict:
        entry = table.get(key, {})
        return {"verdict_counts": dict(entry.get("verdict_counts", {})),
                "first_seen": entry.get("first_seen"),
                "last_seen": entry.get("last_seen"),
                "raw": dict(entry)}

    def lookup_domain(self, domain: str) -> dict:
        self.calls.append(("domain", domain))
        return self._answer(self.domains, domain)

    def lookup_url(self, url: str) -> dict:
        self.calls.append(("url", url))
        return self._answer(self.urls, url)

    def lookup_file(self, sha256: str) -> dict:
        self.calls.append(("file", sha256))
        return self._answer(self.files, sha256)


class _TokenBucket:
    """Blocking token bucket; one bucket is shared per provider instance so
    rate limits hold across concurrent analyses."""

    def __init__(self, rate_per_minute: float, capacity: int | None = None):
        self.rate = rate_per_minute / 60.0
        self.capacity = capacity or max(1, int(rate_per_minute))
        self.tokens = float(self.capacity)
        self.updated = time.monotonic()
        self._lock = threading.Lock()

    def acquire(self) -> None:
        while True:
            with self._lock:
                now = time.monotonic()
                self.tokens = min(self.capacity,
                                  self.tokens + (now - self.updated) * self.rate)
                self.updated = now
                if self.tokens >= 1:
                    self.tokens -= 1
                    return
                wait = (1 - self.tokens) / self.rate if self.rate > 0 else 0.05
            time.sleep(min(wait, 0.5))


_DOMAIN_RE = re.compile(
    r"^(?=.{1,253}$)([a-zA-Z0-9_](?:[a-zA-Z0-9_-]{0,61}[a-zA-Z0-9_])?\.)+"
    r"[a-zA-Z][a-zA-Z0-9-]{1,62}$")


class IntelInspector:
    """Composite domain/URL/remote-file inspector with caching and rate
    limiting.

    The public entry point, :meth:`inspect`, takes exactly one argument:
    the target. File hashes are always computed internally from fetched
    bytes; there is intentionally no way to pass one in.
    """

    def __init__(self, provider, fetch_config: FetchConfig | None = None,
                 cache_ttl_s: float = 3600.0,
                 rate_per_minute: float = 240.0,
                 clock=time.monotonic,
                 session: requests.Session | None = None):
        self.provider = provider
        self.fetch_config = fetch_config or FetchConfig()
        self.cache_ttl_s = cache_ttl_s
        self.clock = clock
        self._bucket = _TokenBucket(rate_per_minute)
        self._cache: dict[tuple[str, str], tuple[float, ThreatReport]] = {}
        self._cache_lock = threading.Lock()
        self._session = session

    @staticmethod
    def _classify(target: str) -> tuple[str, str]:
        stripped = target.strip()
        if not stripped:
            raise InvalidTargetError("target is empty")
        if "://" in stripped:
            parts = urlsplit(stripped)
            if parts.scheme not in ("http", "https") or not parts.hostname:
                raise InvalidTargetError(
                    f"target {target!r} is not a fetchable http(s) URL")
            return "url", stripped
        candidate = stripped.lower().rstrip(".")
        if _DOMAIN_RE.match(candidate):
            return "domain", candidate
        raise InvalidTargetError(
            f"target {target!r} is neither a valid domain name nor an "
            "http(s) URL")

    def _cache_get(self, key: tuple[str, str]) -> ThreatReport | None:
        with self._cache_lock:
            hit = self._cache.get(key)
            if hit and hit[0] > self.clock():
                return hit[1]
            if hit:
                del self._cache[key]
        return None

    def _cache_put(self, key: tuple[str, str], report: ThreatReport) -> None:
        with self._cache_lock:
            self._cache[key] = (self.clock() + self.cache_ttl_s, report)

    def _build(self, target: str, kind: str, answer: dict,
               resolved_hash: str | None = None,
               extra_raw: dict | None = None) -> ThreatReport:
        raw = dict(answer.get("raw", {}))
        if extra_raw:
            raw.update(extra_raw)
        return ThreatReport(
            target=target, target_kind=kind,
            verdict_counts=answer.get("verdict_counts", {}),
            first_seen=answer.get("first_seen"),
            last_seen=answer.get("last_seen"),
            resolved_hash=resolved_hash,
            provider=getattr(self.provider, "provider_id", "intel"),
            cached=False, raw=raw)

    def inspect(self, target: str) -> ThreatReport:
        """Inspect a domain or URL; remote files are hashed internally.

        A URL whose body is a non-HTML/non-text download (or is served as an
        attachment) is treated as a remote file: its sha256, computed here
        from the fetched stream, keys the provider's file endpoint.
        """
        kind, canonical = self._classify(target)
        key = (kind, canonical)
        cached = self._cache_get(key)
        if cached is not None:
            return replace(cached, cached=True)

        if kind == "domain":
            self._bucket.acquire()
            report = self._build(canonical, "domain",
                                 self.provider.lookup_domain(canonical))
        else:
            report = self._inspect_url(canonical)
        self._cache_put(key, report)
        return report

    def _inspect_url(self, url: str) -> ThreatReport:
        fetch_error = None
        fetched = None
        try:
            fetched = fetch_content_at_url(url, config=self.fetch_config,
                                           session=self._session)
        except ToolError as exc:
            fetch_error = str(exc)
        is_file = (fetched is not None and fetched.status < 400
                   and fetched.content_kind in ("archive", "binary", "script"))
        if is_file and fetched.sha256:
            self._bucket.acquire()
            answer = self.provider.lookup_file(fetched.sha256)
            return self._build(
                url, "file", answer, resolved_hash=fetched.sha256,
                extra_raw={"fetched_kind": fetched.content_kind,
                           "fetched_bytes": len(fetched.body)})
        self._bucket.acquire()
        answer = self.provider.lookup_url(url)
        extra: dict = {}
        if fetch_error:
            extra["fetch_error"] = fetch_error
        elif fetched is not None:
            extra["fetched_kind"] = fetched.content_kind
            extra["fetch_status"] = fetched.status
            if fetched.truncated:
                extra["fetch_truncated"] = True
        return self._build(url, "url", answer, extra_raw=extra)


# --- web search ---------------------------------------------------------------------

@dataclass(frozen=True)
class SearchHit:
    title: str
    url: str
    snippet: str
    relevance_score: float


@dataclass(frozen=True)
class SearchResults:
    query: str
    hits: list[SearchHit]
    filtered_out: int

    def describe(self) -> str:
        if not self.hits:
            return (f"web search for {self.query!r}: no hits above the "
                    f"relevance threshold ({self.filtered_out} filtered out)")
        lines = [f"web search for {self.query!r} "
                 f"({len(self.hits)} hits, {self.filtered_out} filtered out):"]
        for hit in self.hits:
            lines.append(f"- {hit.title} [{hit.url}] "
                         f"(relevance {hit.relevance_score:.2f}): {hit.snippet}")
        return "\n".join(lines)


class ScriptedSearchProvider:
    """Canned search answers matched by substring of the query."""

    def __init__(self, scenarios: dict | None = None):
        # scenarios: {query_substring: [ {title,url,snippet,score}, ... ]}
        self.scenarios = scenarios or {}
        self.calls: list[str] = []

    def search(self, query: str) -> list[dict]:
        self.calls.append(query)
        for needle, hits in self.scenarios.items():
            if needle in query:
                return [dict(h) for h in hits]
        return []


class HttpSearchClient:
    """Minimal client for a hosted search API (Tavily-style JSON dialect)."""

    def __init__(self, base_url: str, api_key: str = "", timeout_s: float = 10.0,
                 session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def search(self, query: str) -> list[dict]:
        try:
            resp = self._session.post(
                f"{self.base_url}/search",
                json={"query": query, "api_key": self.api_key},
                timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise ProviderUnreachableError(
                f"search provider unreachable: {exc}") from exc
        if resp.status_code >= 400:
            raise ProviderUnreachableError(
                f"search provider returned HTTP {resp.status_code}")
        payload = resp.json()
        return [{"title": r.get("title", ""), "url": r.get("url", ""),
                 "snippet": r.get("content", r.get("snippet", "")),
                 "score": r.get("score", 0.0)}
                for r in payload.get("results", [])]


def web_search(query: str, cap: int = 5, *, provider,
               relevance_threshold: float = 0.5) -> SearchResults:
    """Search the web, dropping hits below the relevance threshold.

    Provider scores are renormalized to [0, 1] (divided by the maximum when
    any score exceeds 1) before filtering; surviving hits are ordered by
    score descending and capped.
    """
    if not query.strip():
        raise EmptyQueryError("search query is empty")
    raw_hits = provider.search(query)
    scores = [float(h.get("score", 0.0)) for h in raw_hits]
    max_score = max(scores) if scores else 0.0
    scale = max_score if max_score > 1.0 else 1.0
    hits = []
    filtered_out = 0
    for h, score in zip(raw_hits, scores):
        norm = max(0.0, min(1.0, score / scale if scale else 0.0))
        if norm < relevance_threshold:
            filtered_out += 1
            continue
        hits.append(SearchHit(title=str(h.get("title", "")),
                              url=str(h.get("url", "")),
                              snippet=str(h.get("snippet", "")),
                              relevance_score=norm))
    hits.sort(key=lambda h: h.relevance_score, reverse=True)
    return SearchResults(query=query, hits=hits[:cap], filtered_out=filtered_out)
