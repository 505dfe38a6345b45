"""Prompt template loading.

Templates are versioned text assets, not code constants, so prompt
iteration never requires touching Python. Layout:

    prompts/supervisor/system.txt
    prompts/supervisor/initial_plan.txt
    prompts/supervisor/revise_plan.txt
    prompts/supervisor/report.txt
    prompts/deobfuscator/system.txt
    prompts/web_researcher/system.txt
    prompts/structurer/system.txt

Each file documents its own ``{placeholders}`` in leading ``#`` comment
lines, which the loader strips. An override directory (config
``prompt_dir``) takes precedence over the packaged assets.
"""

from __future__ import annotations

from importlib.resources import files
from pathlib import Path


def load_template(relpath: str, override_dir: str | Path | None = None) -> str:
    """Load a template by relative path like ``supervisor/system.txt``."""
    if override_dir:
        candidate = Path(override_dir) / relpath
        if candidate.exists():
            return _strip_header(candidate.read_text(encoding="utf-8"))
    resource = files(__package__).joinpath(relpath)
    return _strip_header(resource.read_text(encoding="utf-8"))


def _strip_header(text: str) -> str:
    lines = text.splitlines()
    body_start = 0
    for i, line in enumerate(lines):
        if line.startswith("#"):
            body_start = i + 1
        else:
            break
    return "\n".join(lines[body_start:]).lstrip("\n")
