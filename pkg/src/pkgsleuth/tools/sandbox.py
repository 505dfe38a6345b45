"""Sandboxed execution of untrusted Python fragments.

Containment contract: hard wall-clock kill at the limit, no network egress,
memory and file-size ceilings, scrubbed environment, and writes confined to
a private working directory whose created files are enumerated (path, size,
sha256) after the run.

Mechanism is layered, strongest available first:

* ``unshare -rn`` places the fragment in an empty network namespace when the
  host supports unprivileged user namespaces (probed once per process, under
  the same credentials the fragment will run with);
* when running as root, the child drops to an unprivileged uid/gid so
  filesystem credentials cannot reach outside the sandbox directory;
* POSIX rlimits cap address space, file size, open files, and processes;
* an in-process interpreter profile (see ``sandbox_runner.py``) blocks
  socket creation and out-of-root writes as the portable fallback.

The bootstrap is injected with ``python -c`` and the fragment is opened
relative to the sandbox directory, so the demoted child never needs to
traverse the (possibly root-only) directories above the sandbox root.
"""

from __future__ import annotations

import hashlib
import logging
import os
import shutil
import signal
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import SandboxUnavailableError

logger = logging.getLogger("pkgsleuth.sandbox")

OUTPUT_CAP_BYTES = 64 * 1024
_RUNNER_PATH = Path(__file__).with_name("sandbox_runner.py")
_FRAGMENT_NAME = "__fragment__.py"

_ENV_ALLOWLIST = ("PATH", "LANG", "LC_ALL", "TZ")


@dataclass(frozen=True)
class SandboxConfig:
    interpreter: str = sys.executable
    memory_bytes: int = 512 * 1024 * 1024
    file_size_bytes: int = 16 * 1024 * 1024
    grace_s: float = 1.0
    drop_uid: int = 65534
    drop_gid: int = 65534
    use_unshare: bool | None = None  # None = autodetect once per process


@dataclass(frozen=True)
class SandboxArtifact:
    path: str
    size: int
    sha256: str


@dataclass(frozen=True)
class ExecutionResult:
    stdout: str
    stderr: str
    exit_status: int | str  # int, or "timeout" / "killed"
    wall_time: float
    artifacts: list[SandboxArtifact] = field(default_factory=list)

    @property
    def timed_out(self) -> bool:
        return self.exit_status == "timeout"


def _make_preexec(config: SandboxConfig, drop_privileges: bool):
    def preexec():
        import resource

        os.setsid()
        if drop_privileges:
            os.setgroups([])
            os.setgid(config.drop_gid)
            os.setuid(config.drop_uid)
        resource.setrlimit(resource.RLIMIT_FSIZE,
                           (config.file_size_bytes, config.file_size_bytes))
        resource.setrlimit(resource.RLIMIT_NOFILE, (128, 128))
        try:
            resource.setrlimit(resource.RLIMIT_AS,
                               (config.memory_bytes, config.memory_bytes))
        except (ValueError, OSError):
            pass
        try:
            resource.setrlimit(resource.RLIMIT_NPROC, (64, 64))
        except (ValueError, OSError):
            pass

    return preexec


_unshare_works: bool | None = None


def _unshare_available(config: SandboxConfig, drop_privileges: bool) -> bool:
    global _unshare_works
    if _unshare_works is None:
        try:
            probe = subprocess.run(
                ["unshare", "-rn", "true"], capture_output=True, timeout=10,
                preexec_fn=_make_preexec(config, drop_privileges))
            _unshare_works = probe.returncode == 0
        except (OSError, subprocess.TimeoutExpired, subprocess.SubprocessError):
            _unshare_works = False
        if not _unshare_works:
            logger.warning("unshare network namespaces unavailable; relying "
                           "on the in-process network guard")
    return _unshare_works


_runner_source: str | None = None


def _load_runner_source() -> str:
    global _runner_source
    if _runner_source is None:
        if not _RUNNER_PATH.exists():
            raise SandboxUnavailableError(
                f"sandbox runner missing: {_RUNNER_PATH}")
        _runner_source = _RUNNER_PATH.read_text(encoding="utf-8")
    return _runner_source


def _enumerate_artifacts(root: Path, exclude: set[str]) -> list[SandboxArtifact]:
    artifacts = []
    for entry in sorted(root.rglob("*")):
        if not entry.is_file() or entry.is_symlink():
            continue
        rel = entry.relative_to(root).as_posix()
        if rel in exclude:
            continue
        data = entry.read_bytes()
        artifacts.append(SandboxArtifact(path=rel, size=len(data),
                                         sha256=hashlib.sha256(data).hexdigest()))
    return artifacts


def _truncate(data: bytes) -> str:
    text = data[:OUTPUT_CAP_BYTES].decode("utf-8", errors="replace")
    if len(data) > OUTPUT_CAP_BYTES:
        text += f"\n[... output truncated at {OUTPUT_CAP_BYTES} bytes ...]"
    return text


def execute_python_code(code: str, limit: float = 60.0,
                        config: SandboxConfig | None = None,
                        work_dir: str | Path | None = None) -> ExecutionResult:
    """Run a Python fragment in an isolated working directory.

    ``work_dir`` becomes the sandbox root (a temporary directory is created
    and removed when omitted). Timeouts and crashes are results, not
    exceptions; only a misconfigured sandbox raises.
    """
    if not code.strip():
        raise ValueError("code fragment is empty")
    config = config or SandboxConfig()
    interpreter = shutil.which(config.interpreter) or config.interpreter
    if not Path(interpreter).exists():
        raise SandboxUnavailableError(
            f"sandbox interpreter not found: {config.interpreter}")
    runner_source = _load_runner_source()

    owns_dir = work_dir is None
    root = Path(tempfile.mkdtemp(prefix="sandbox-")) if owns_dir else Path(work_dir)
    root.mkdir(parents=True, exist_ok=True)
    fragment = root / _FRAGMENT_NAME
    fragment.write_text(code, encoding="utf-8")

    drop_privileges = os.geteuid() == 0
    if drop_privileges:
        os.chown(root, config.drop_uid, config.drop_gid)
        os.chown(fragment, config.drop_uid, config.drop_gid)

    use_unshare = config.use_unshare
    if use_unshare is None:
        use_unshare = _unshare_available(config, drop_privileges)
    cmd = (["unshare", "-r", "-n", "--"] if use_unshare else [])
    cmd += [interpreter, "-I", "-B", "-c", runner_source, _FRAGMENT_NAME, "."]

    env = {k: os.environ[k] for k in _ENV_ALLOWLIST if k in os.environ}
    env.update({"HOME": str(root), "TMPDIR": str(root),
                "PYTHONDONTWRITEBYTECODE": "1"})

    started = time.monotonic()
    try:
        proc = subprocess.Popen(
            cmd, cwd=root, env=env, stdout=subprocess.PIPE,
            stderr=subprocess.PIPE, stdin=subprocess.DEVNULL,
            preexec_fn=_make_preexec(config, drop_privileges))
    except OSError as exc:
        raise SandboxUnavailableError(f"cannot launch sandbox: {exc}") from exc

    timed_out = False
    try:
        stdout, stderr = proc.communicate(timeout=limit)
    except subprocess.TimeoutExpired:
        timed_out = True
        try:
            os.killpg(proc.pid, signal.SIGKILL)
        except ProcessLookupError:
            pass
        stdout, stderr = proc.communicate()
    wall_time = time.monotonic() - started

    if timed_out:
        status: int | str = "timeout"
    elif proc.returncode < 0:
        status = "killed"
    else:
        status = proc.returncode

    artifacts = _enumerate_artifacts(root, exclude={_FRAGMENT_NAME})
    result = ExecutionResult(stdout=_truncate(stdout), stderr=_truncate(stderr),
                             exit_status=status, wall_time=wall_time,
                             artifacts=artifacts)
    if owns_dir:
        shutil.rmtree(root, ignore_errors=True)
    return result
