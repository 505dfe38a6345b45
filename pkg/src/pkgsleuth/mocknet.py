"""Mock network services for deterministic tests and scripted scenarios.

``MockIntelServer`` speaks the minimal VirusTotal-v3-shaped HTTP/JSON
dialect that :class:`pkgsleuth.tools.web.VirusTotalClient` consumes:

    GET /domains/<domain>
    GET /urls/<urlsafe-b64-url-id-without-padding>
    GET /files/<sha256>

Responses are ``{"data": {"attributes": {"last_analysis_stats": {...},
"first_submission_date": ..., "last_analysis_date": ...}}}``; unknown
targets return 404 (so a file lookup succeeds only with the exact hash the
server was seeded with). Request counts per path support cache and retry
assertions.

``MockWebServer`` serves registered byte bodies with optional redirects,
delays, and status codes for fetch tests. Both bind 127.0.0.1 on an
ephemeral port; use them as context managers or call ``close()``.
"""

from __future__ import annotations

import base64
import json
import threading
import time
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer


class _CountingServer:
    def __init__(self, handler_cls):
        self.request_counts: dict[str, int] = {}
        self._lock = threading.Lock()
        self._server = ThreadingHTTPServer(("127.0.0.1", 0), handler_cls)
        self._server.owner = self
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        daemon=True)
        self._thread.start()

    @property
    def host(self) -> str:
        return "127.0.0.1"

    @property
    def port(self) -> int:
        return self._server.server_address[1]

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    def count(self, path: str) -> int:
        with self._lock:
            return self.request_counts.get(path, 0)

    def total_requests(self) -> int:
        with self._lock:
            return sum(self.request_counts.values())

    def record(self, path: str) -> None:
        with self._lock:
            self.request_counts[path] = self.request_counts.get(path, 0) + 1

    def close(self) -> None:
        self._server.shutdown()
        self._server.server_close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False


def _vt_payload(stats: dict, first_seen=None, last_seen=None) -> dict:
    return {"data": {"attributes": {
        "last_analysis_stats": stats,
        "first_submission_date": first_seen,
        "last_analysis_date": last_seen,
    }}}


class _IntelHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):  # quiet
        pass

    def do_GET(self):
        server: MockIntelServer = self.server.owner
        server.record(self.path)
        if server.fail_next_with:
            status = server.fail_next_with.pop(0)
            self.send_response(status)
            self.end_headers()
            return
        answer = server.lookup(self.path)
        if answer is None:
            self.send_response(404)
            self.end_headers()
            return
        body = json.dumps(answer).encode()
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class MockIntelServer(_CountingServer):
    def __init__(self):
        self.domains: dict[str, dict] = {}
        self.urls: dict[str, dict] = {}
        self.files: dict[str, dict] = {}
        self.fail_next_with: list[int] = []  # HTTP statuses to inject
        super().__init__(_IntelHandler)

    def seed_domain(self, domain: str, stats: dict, first_seen=None,
                    last_seen=None) -> None:
        self.domains[domain] = _vt_payload(stats, first_seen, last_seen)

    def seed_url(self, url: str, stats: dict) -> None:
        url_id = base64.urlsafe_b64encode(url.encode()).decode().rstrip("=")
        self.urls[url_id] = _vt_payload(stats)

    def seed_file(self, sha256: str, stats: dict) -> None:
        self.files[sha256] = _vt_payload(stats)

    def lookup(self, path: str) -> dict | None:
        if path.startswith("/domains/"):
            return self.domains.get(path[len("/domains/"):])
        if path.startswith("/urls/"):
            return self.urls.get(path[len("/urls/"):])
        if path.startswith("/files/"):
            return self.files.get(path[len("/files/"):])
        return None


class _WebHandler(BaseHTTPRequestHandler):
    def log_message(self, *args):
        pass

    def do_GET(self):
        server: MockWebServer = self.server.owner
        server.record(self.path)
        entry = server.routes.get(self.path)
        if entry is None:
            self.send_response(404)
            self.end_headers()
            return
        if entry.get("delay"):
            time.sleep(entry["delay"])
        if entry.get("redirect"):
            self.send_response(entry.get("status", 302))
            self.send_header("Location", entry["redirect"])
            self.end_headers()
            return
        body = entry.get("body", b"")
        self.send_response(entry.get("status", 200))
        self.send_header("Content-Type",
                         entry.get("content_type", "application/octet-stream"))
        for name, value in entry.get("headers", {}).items():
            self.send_header(name, value)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)


class MockWebServer(_CountingServer):
    def __init__(self):
        self.routes: dict[str, dict] = {}
        super().__init__(_WebHandler)

    def serve(self, path: str, body: bytes, content_type: str = "text/plain",
              status: int = 200, headers: dict | None = None,
              delay: float = 0.0) -> str:
        """Register a body at ``path``; returns the absolute URL."""
        self.routes[path] = {"body": body, "content_type": content_type,
                             "status": status, "headers": headers or {},
                             "delay": delay}
        return self.url + path

    def redirect(self, path: str, target: str, status: int = 302) -> str:
        self.routes[path] = {"redirect": target, "status": status}
        return self.url + path
