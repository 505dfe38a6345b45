"""Model access gateway: three configurable roles, traced exchanges, and
validated structured-output extraction.

All model traffic flows through :class:`Gateway`, which binds the
``supervisor``, ``worker``, and ``structurer`` roles to a chat-completion
backend. Two backends ship here: an HTTP client for any chat-completions
compatible endpoint, and a scripted backend that replays canned responses so
the entire pipeline becomes bit-deterministic under test.

Structured extraction is parse-first: fenced or embedded JSON in the raw
text is tried before the structurer model is asked to repair it, and nothing
is ever returned that fails schema validation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import requests

logger = logging.getLogger("pkgsleuth.gateway")

TOKEN_CHARS = 4  # rough chars-per-token heuristic used for ceiling checks

ROLE_NAMES = ("supervisor", "worker", "structurer")


def estimate_tokens(text: str) -> int:
    return max(1, len(text) // TOKEN_CHARS)


class GatewayError(Exception):
    pass


class ContextOverflowError(GatewayError):
    """Prompt exceeds the role's context ceiling; never retried, no network
    call is made. The caller should re-render a smaller prompt."""


class EndpointUnreachableError(GatewayError):
    def __init__(self, message: str, attempts: int):
        super().__init__(message)
        self.attempts = attempts


class ScriptedBackendExhausted(GatewayError):
    """The scripted backend had no reply matching the request."""


class ExtractionFailedError(GatewayError):
    """Structured extraction failed after repair retries; carries the raw
    text so callers can run a fallback path."""

    def __init__(self, message: str, raw_text: str, violations: list[str]):
        super().__init__(message)
        self.raw_text = raw_text
        self.violations = violations


# --- roles and trace ---------------------------------------------------------

@dataclass(frozen=True)
class ModelRole:
    role: str
    model_id: str
    context_ceiling: int
    temperature: float
    top_p: float = 1.0
    max_tokens: int | None = None


def default_roles(supervisor_model: str = "supervisor-model",
                  worker_model: str = "worker-model",
                  structurer_model: str = "structurer-model") -> dict[str, ModelRole]:
    return {
        "supervisor": ModelRole("supervisor", supervisor_model, 32768, 0.2),
        "worker": ModelRole("worker", worker_model, 16384, 0.3),
        "structurer": ModelRole("structurer", structurer_model, 8192, 0.0),
    }


@dataclass(frozen=True)
class ChatExchange:
    role_used: str
    model_id: str
    system: str
    user: str
    response: str
    prompt_tokens: int
    completion_tokens: int
    latency_s: float


class RunTrace:
    """Append-only record of every model interaction in one run.

    Thread-safe; optionally mirrors each exchange to a JSONL file.
    """

    def __init__(self, path: str | Path | None = None):
        self.exchanges: list[ChatExchange] = []
        self._path = Path(path) if path else None
        self._lock = threading.Lock()

    def append(self, exchange: ChatExchange) -> None:
        with self._lock:
            self.exchanges.append(exchange)
            if self._path:
                with self._path.open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(exchange.__dict__, sort_keys=True) + "\n")

    def __len__(self) -> int:
        return len(self.exchanges)

    def count_for_role(self, role: str) -> int:
        return sum(1 for e in self.exchanges if e.role_used == role)

    def total_tokens(self) -> tuple[int, int]:
        prompt = sum(e.prompt_tokens for e in self.exchanges)
        completion = sum(e.completion_tokens for e in self.exchanges)
        return prompt, completion


# --- backends ------------------------------------------------------------------

@dataclass(frozen=True)
class BackendReply:
    text: str
    prompt_tokens: int
    completion_tokens: int


class RetryableBackendError(GatewayError):
    pass


class HttpChatBackend:
    """Client for a chat-completions style HTTP/JSON endpoint."""

    def __init__(self, base_url: str, api_key: str = "", timeout_s: float = 120.0,
                 session: requests.Session | None = None):
        self.base_url = base_url.rstrip("/")
        self.api_key = api_key
        self.timeout_s = timeout_s
        self._session = session or requests.Session()

    def complete(self, role: ModelRole, system: str, user: str) -> BackendReply:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        body = {
            "model": role.model_id,
            "messages": [{"role": "system", "content": system},
                         {"role": "user", "content": user}],
            "temperature": role.temperature,
            "top_p": role.top_p,
        }
        if role.max_tokens:
            body["max_tokens"] = role.max_tokens
        try:
            resp = self._session.post(f"{self.base_url}/chat/completions",
                                      json=body, headers=headers,
                                      timeout=self.timeout_s)
        except requests.RequestException as exc:
            raise RetryableBackendError(f"endpoint request failed: {exc}") from exc
        if resp.status_code >= 500 or resp.status_code == 429:
            raise RetryableBackendError(
                f"endpoint returned HTTP {resp.status_code}")
        if resp.status_code >= 400:
            raise GatewayError(
                f"endpoint rejected request: HTTP {resp.status_code}: "
                f"{resp.text[:500]}")
        payload = resp.json()
        text = payload["choices"][0]["message"]["content"]
        usage = payload.get("usage", {})
        return BackendReply(
            text=text,
            prompt_tokens=int(usage.get("prompt_tokens",
                                        estimate_tokens(system + user))),
            completion_tokens=int(usage.get("completion_tokens",
                                            estimate_tokens(text))),
        )


@dataclass
class ScriptedReply:
    """One canned backend response.

    Matches when ``role`` (if set) equals the requesting role and ``match``
    (if set) occurs in the combined system+user prompt, or when
    ``prompt_sha256`` equals the prompt digest. Non-``repeat`` replies are
    consumed once, in listed order; ``delay`` simulates a slow endpoint.
    """

    response: str
    role: str | None = None
    match: str | None = None
    prompt_sha256: str | None = None
    repeat: bool = False
    delay: float = 0.0
    consumed: bool = False


def prompt_digest(system: str, user: str) -> str:
    return hashlib.sha256((system + "\x00" + user).encode("utf-8")).hexdigest()


class ScriptedBackend:
    """Deterministic backend replaying canned replies; used by every
    acceptance-level test and by the CLI's scripted mode."""

    def __init__(self, replies: list[ScriptedReply] | None = None):
        self.replies = list(replies or [])
        self._lock = threading.Lock()

    def add(self, response: str, *, role: str | None = None,
            match: str | None = None, repeat: bool = False,
            delay: float = 0.0, prompt_sha256: str | None = None) -> None:
        self.replies.append(ScriptedReply(response=response, role=role,
                                          match=match, repeat=repeat,
                                          delay=delay,
                                          prompt_sha256=prompt_sha256))

    @classmethod
    def from_file(cls, path: str | Path) -> "ScriptedBackend":
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
        backend = cls()
        for entry in entries:
            response = entry["response"]
            if not isinstance(response, str):
                response = json.dumps(response)
            backend.add(response, role=entry.get("role"),
                        match=entry.get("match"),
                        repeat=bool(entry.get("repeat", False)),
                        delay=float(entry.get("delay", 0.0)),
                        prompt_sha256=entry.get("prompt_sha256"))
        return backend

    def complete(self, role: ModelRole, system: str, user: str) -> BackendReply:
        digest = prompt_digest(system, user)
        prompt = system + "\n" + user
        with self._lock:
            for reply in self.replies:
                if reply.consumed and not reply.repeat:
                    continue
                if reply.role and reply.role != role.role:
                    continue
                if reply.prompt_sha256 and reply.prompt_sha256 != digest:
                    continue
                if reply.match and reply.match not in prompt:
                    continue
                reply.consumed = True
                chosen = reply
                break
            else:
                raise ScriptedBackendExhausted(
                    f"no scripted reply for role={role.role} "
                    f"prompt_sha256={digest[:12]}… prompt head: {prompt[:160]!r}")
        if chosen.delay:
            time.sleep(chosen.delay)
        return BackendReply(text=chosen.response,
                            prompt_tokens=estimate_tokens(prompt),
                            completion_tokens=estimate_tokens(chosen.response))


# --- schema-validated extraction ------------------------------------------------

@dataclass(frozen=True)
class FieldSpec:
    """Declarative description of one field for structured extraction."""

    type: str  # string | integer | number | boolean | object | array
    required: bool = True
    enum: tuple = ()
    items: "FieldSpec | None" = None
    fields: tuple = ()  # tuple of (name, FieldSpec) pairs for objects

    def field_map(self) -> dict[str, "FieldSpec"]:
        return dict(self.fields)


@dataclass(frozen=True)
class SchemaSpec:
    """Schema for a top-level JSON object; validation is deterministic."""

    fields: tuple  # tuple of (name, FieldSpec) pairs
    description: str = ""

    def field_map(self) -> dict[str, FieldSpec]:
        return dict(self.fields)

    def validate(self, value) -> list[str]:
        return _validate_object(value, self.field_map(), path="$")

    def describe(self) -> str:
        lines = [self.description] if self.description else []
        lines.append("Required JSON object fields:")
        lines.extend(_describe_fields(self.field_map(), indent="  "))
        return "\n".join(lines)


_TYPE_CHECKS = {
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "number": lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "object": lambda v: isinstance(v, dict),
    "array": lambda v: isinstance(v, list),
}


def _validate_value(value, spec: FieldSpec, path: str) -> list[str]:
    check = _TYPE_CHECKS.get(spec.type)
    if check is None:
        return [f"{path}: schema names unknown type {spec.type!r}"]
    if not check(value):
        return [f"{path}: expected {spec.type}, got {type(value).__name__}"]
    violations: list[str] = []
    if spec.enum and value not in spec.enum:
        violations.append(f"{path}: value {value!r} not one of {list(spec.enum)}")
    if spec.type == "array" and spec.items is not None:
        for i, item in enumerate(value):
            violations.extend(_validate_value(item, spec.items, f"{path}[{i}]"))
    if spec.type == "object" and spec.fields:
        violations.extend(_validate_object(value, spec.field_map(), path))
    return violations


def _validate_object(value, fields: dict[str, FieldSpec], path: str) -> list[str]:
    if not isinstance(value, dict):
        return [f"{path}: expected object, got {type(value).__name__}"]
    violations = []
    for name, spec in fields.items():
        if name not in value:
            if spec.required:
                violations.append(f"{path}.{name}: required field missing")
            continue
        violations.extend(_validate_value(value[name], spec, f"{path}.{name}"))
    return violations


def _describe_fields(fields: dict[str, FieldSpec], indent: str) -> list[str]:
    lines = []
    for name, spec in fields.items():
        extras = []
        if not spec.required:
            extras.append("optional")
        if spec.enum:
            extras.append("one of " + ", ".join(repr(e) for e in spec.enum))
        suffix = f" ({'; '.join(extras)})" if extras else ""
        lines.append(f"{indent}{name}: {spec.type}{suffix}")
        if spec.type == "object" and spec.fields:
            lines.extend(_describe_fields(spec.field_map(), indent + "  "))
        if spec.type == "array" and spec.items is not None:
            lines.append(f"{indent}  items: {spec.items.type}")
            if spec.items.type == "object" and spec.items.fields:
                lines.extend(_describe_fields(spec.items.field_map(),
                                              indent + "    "))
    return lines


_FENCE_RE = re.compile(r"```(?:json)?\s*\n(.*?)```", re.S)


def _balanced_objects(raw: str) -> list[str]:
    """Top-level balanced ``{...}`` substrings, longest candidates first."""
    spans = []
    depth = 0
    start = -1
    in_string = False
    escape = False
    for i, ch in enumerate(raw):
        if in_string:
            if escape:
                escape = False
            elif ch == "\\":
                escape = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            if depth == 0:
                start = i
            depth += 1
        elif ch == "}":
            if depth > 0:
                depth -= 1
                if depth == 0 and start >= 0:
                    spans.append(raw[start:i + 1])
    return spans


def candidate_json_blocks(raw: str) -> list[str]:
    candidates = [m.strip() for m in _FENCE_RE.findall(raw)]
    candidates.extend(_balanced_objects(raw))
    stripped = raw.strip()
    if stripped.startswith("{"):
        candidates.append(stripped)
    # preserve order, drop duplicates
    return list(dict.fromkeys(c for c in candidates if c))


def try_parse_structured(raw: str, schema: SchemaSpec):
    """Parse-first extraction attempt: (value, violations_of_best_candidate)."""
    last_violations = ["no JSON object found in text"]
    for candidate in candidate_json_blocks(raw):
        try:
            value = json.loads(candidate)
        except json.JSONDecodeError:
            continue
        violations = schema.validate(value)
        if not violations:
            return value, []
        last_violations = violations
    return None, last_violations


# --- the gateway -----------------------------------------------------------------

STRUCTURER_REPAIR_RETRIES = 2  # model calls beyond the first structurer attempt


class Gateway:
    """Bound model roles + backend + per-role in-flight caps.

    One gateway is shareable across concurrent analyses; each analysis
    passes its own :class:`RunTrace` so exchanges land in the right run.
    """

    def __init__(self, backend, roles: dict[str, ModelRole] | None = None,
                 *, max_in_flight: int = 10, max_attempts: int = 3,
                 backoff_base_s: float = 0.2, trace: RunTrace | None = None,
                 structurer_system: str | None = None):
        self.backend = backend
        self.roles = roles or default_roles()
        for name in ROLE_NAMES:
            if name not in self.roles:
                raise GatewayError(f"model role {name!r} is not bound")
        self.max_attempts = max_attempts
        self.backoff_base_s = backoff_base_s
        self.default_trace = trace or RunTrace()
        self._semaphores = {name: threading.BoundedSemaphore(max_in_flight)
                            for name in self.roles}
        self._structurer_system = structurer_system

    def complete(self, role: str, system: str, user: str,
                 trace: RunTrace | None = None) -> str:
        """Run one chat completion for ``role``; records a ChatExchange.

        Raises ContextOverflowError before any network call when the prompt
        estimate exceeds the role's ceiling, and EndpointUnreachableError
        after bounded retries with exponential backoff.
        """
        cfg = self.roles[role]
        prompt_estimate = estimate_tokens(system) + estimate_tokens(user)
        if prompt_estimate > cfg.context_ceiling:
            raise ContextOverflowError(
                f"prompt estimate {prompt_estimate} tokens exceeds the "
                f"{role} ceiling of {cfg.context_ceiling}")
        trace = trace if trace is not None else self.default_trace
        last_error: Exception | None = None
        with self._semaphores[role]:
            for attempt in range(1, self.max_attempts + 1):
                started = time.monotonic()
                try:
                    reply = self.backend.complete(cfg, system, user)
                except RetryableBackendError as exc:
                    last_error = exc
                    if attempt < self.max_attempts:
                        time.sleep(min(self.backoff_base_s * 2 ** (attempt - 1),
                                       5.0))
                    continue
                latency = time.monotonic() - started
                trace.append(ChatExchange(
                    role_used=role, model_id=cfg.model_id, system=system,
                    user=user, response=reply.text,
                    prompt_tokens=reply.prompt_tokens,
                    completion_tokens=reply.completion_tokens,
                    latency_s=latency))
                return reply.text
        raise EndpointUnreachableError(
            f"{role} endpoint unreachable after {self.max_attempts} attempts: "
            f"{last_error}", attempts=self.max_attempts)

    def extract_structured(self, raw: str, schema: SchemaSpec,
                           trace: RunTrace | None = None):
        """Extract a schema-valid value from free text.

        Direct parse first (zero model calls); otherwise the structurer role
        repairs the text, with up to two validation-guided retries. The
        returned value always validates against ``schema``.
        """
        if not schema.fields:
            raise GatewayError("schema is empty")
        value, violations = try_parse_structured(raw, schema)
        if value is not None:
            return value
        system = self._structurer_system or (
            "You convert analysis text into a single JSON object that follows "
            "the requested schema exactly. Reply with only the JSON object.")
        for attempt in range(1 + STRUCTURER_REPAIR_RETRIES):
            user = (f"{schema.describe()}\n\n"
                    f"Source text:\n{raw}\n")
            if attempt > 0:
                user += ("\nYour previous JSON had these problems, fix them:\n- "
                         + "\n- ".join(violations))
            reply = self.complete("structurer", system, user, trace=trace)
            value, violations = try_parse_structured(reply, schema)
            if value is not None:
                return value
        raise ExtractionFailedError(
            "structured extraction failed after "
            f"{1 + STRUCTURER_REPAIR_RETRIES} structurer calls: "
            + "; ".join(violations),
            raw_text=raw, violations=violations)
