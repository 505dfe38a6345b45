"""Operator command line: analyze one package, run batches, compute metrics,
inspect runs.

The CLI is a thin shell over the library: configuration loading, wiring,
and exit-code mapping live here; no analysis logic does. Configuration
merges flat key=value files, ``PKGSLEUTH_*`` environment variables, and
flags (flags > environment > file > defaults), and the effective
configuration is printed at startup with secrets redacted.

Exit codes: 0 benign, 2 configuration error, 3 malicious, 4 needs_review,
5 timeout or failed analysis.
"""

from __future__ import annotations

import json
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import click

from . import evaluation
from .gateway import Gateway, HttpChatBackend, ModelRole, ScriptedBackend
from .ingest import IngestError, extract_archive, resolve_scope
from .state import read_checkpoint
from .supervisor import AnalysisConfig, run_analysis
from .tools.sandbox import SandboxConfig
from .tools.web import (FetchConfig, HttpSearchClient, IntelInspector,
                        ScriptedSearchProvider, VirusTotalClient)
from .workers import bind_tools

ENV_PREFIX = "PKGSLEUTH_"
_SECRET_MARKERS = ("key", "token", "secret", "password")

VERDICT_EXIT_CODES = {"benign": 0, "malicious": 3, "needs_review": 4}
EXIT_CONFIG_ERROR = 2
EXIT_NOT_COMPLETED = 5


class ConfigError(Exception):
    pass


@dataclass
class CliConfig:
    backend: str = "http"  # http | scripted
    endpoint_url: str = ""
    api_key: str = ""
    scripted_replies: str = ""
    supervisor_model: str = "supervisor-model"
    worker_model: str = "worker-model"
    structurer_model: str = "structurer-model"
    supervisor_context: int = 32768
    worker_context: int = 16384
    structurer_context: int = 8192
    budget_total: int = 12
    wall_timeout: float = 1200.0
    inner_budget: int = 6
    run_root: str = "runs"
    prompt_dir: str = ""
    intel_url: str = ""
    intel_api_key: str = ""
    intel_cache_ttl: float = 3600.0
    intel_rate_per_minute: float = 240.0
    search_url: str = ""
    search_api_key: str = ""
    search_scripted: str = ""
    search_cap: int = 5
    relevance_threshold: float = 0.5
    fetch_ceiling: int = 1024 * 1024
    fetch_timeout: float = 10.0
    allow_hosts: str = ""
    request_timeout: float = 120.0
    max_in_flight: int = 10
    sandbox_interpreter: str = sys.executable


def parse_config_file(path: str | Path) -> dict:
    """Flat, commented key=value config format."""
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8")
                                  .splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(name: str, raw: str, target_type) -> object:
    try:
        if target_type is bool:
            return raw.lower() in ("1", "true", "yes", "on")
        return target_type(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config key {name}: cannot parse {raw!r} as "
                          f"{target_type.__name__}: {exc}")


def load_config(config_file: str | None, overrides: dict) -> CliConfig:
    """Merge defaults <- file <- environment <- flag overrides."""
    cfg = CliConfig()
    known = {f.name: f.type for f in fields(CliConfig)}
    types = {name: type(getattr(cfg, name)) for name in known}

    def apply(source: dict, origin: str) -> None:
        for key, raw in source.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r} (from {origin})")
            if raw is None:
                continue
            value = (_coerce(key, raw, types[key])
                     if isinstance(raw, str) else raw)
            setattr(cfg, key, value)

    if config_file:
        if not Path(config_file).exists():
            raise ConfigError(f"config file not found: {config_file}")
        apply(parse_config_file(config_file), config_file)
    env = {key[len(ENV_PREFIX):].lower(): value
           for key, value in os.environ.items()
           if key.startswith(ENV_PREFIX)}
    apply(env, "environment")
    apply(overrides, "flags")
    return cfg


def render_effective_config(cfg: CliConfig) -> str:
    lines = ["effective configuration:"]
    for f in sorted(fields(CliConfig), key=lambda f: f.name):
        value = getattr(cfg, f.name)
        if value and any(marker in f.name for marker in _SECRET_MARKERS):
            value = "***redacted***"
        lines.append(f"  {f.name} = {value}")
    return "\n".join(lines)


# --- wiring --------------------------------------------------------------------------

def build_gateway(cfg: CliConfig) -> Gateway:
    roles = {
        "supervisor": ModelRole("supervisor", cfg.supervisor_model,
                                cfg.supervisor_context, 0.2),
        "worker": ModelRole("worker", cfg.worker_model,
                            cfg.worker_context, 0.3),
        "structurer": ModelRole("structurer", cfg.structurer_model,
                                cfg.structurer_context, 0.0),
    }
    if cfg.backend == "scripted":
        if not cfg.scripted_replies:
            raise ConfigError("backend=scripted requires scripted_replies "
                              "(path to a replies JSON file)")
        if not Path(cfg.scripted_replies).exists():
            raise ConfigError(f"scripted replies file not found: "
                              f"{cfg.scripted_replies}")
        backend = ScriptedBackend.from_file(cfg.scripted_replies)
    elif cfg.backend == "http":
        if not cfg.endpoint_url:
            raise ConfigError("endpoint_url is required with backend=http")
        backend = HttpChatBackend(cfg.endpoint_url, api_key=cfg.api_key,
                                  timeout_s=cfg.request_timeout)
    else:
        raise ConfigError(f"unknown backend {cfg.backend!r}; "
                          "use 'http' or 'scripted'")
    return Gateway(backend, roles, max_in_flight=cfg.max_in_flight)


def build_toolbox(cfg: CliConfig, sandbox_base: Path | None):
    fetch_config = FetchConfig(
        ceiling_bytes=cfg.fetch_ceiling, timeout_s=cfg.fetch_timeout,
        allow_hosts=frozenset(h.strip() for h in cfg.allow_hosts.split(",")
                              if h.strip()))
    intel = None
    if cfg.intel_url:
        intel = IntelInspector(
            VirusTotalClient(cfg.intel_url, api_key=cfg.intel_api_key),
            fetch_config=fetch_config, cache_ttl_s=cfg.intel_cache_ttl,
            rate_per_minute=cfg.intel_rate_per_minute)
    if cfg.search_scripted:
        scenarios = json.loads(Path(cfg.search_scripted)
                               .read_text(encoding="utf-8"))
        search_provider = ScriptedSearchProvider(scenarios)
    elif cfg.search_url:
        search_provider = HttpSearchClient(cfg.search_url,
                                           api_key=cfg.search_api_key)
    else:
        search_provider = None
    return bind_tools(
        fetch_config=fetch_config,
        sandbox_config=SandboxConfig(interpreter=cfg.sandbox_interpreter),
        intel=intel, search_provider=search_provider,
        search_cap=cfg.search_cap,
        relevance_threshold=cfg.relevance_threshold,
        sandbox_base=sandbox_base)


def _analysis_config(cfg: CliConfig, run_dir: Path | None) -> AnalysisConfig:
    return AnalysisConfig(
        budget_total=cfg.budget_total, wall_timeout_s=cfg.wall_timeout,
        inner_budget=cfg.inner_budget, run_dir=run_dir,
        prompt_dir=Path(cfg.prompt_dir) if cfg.prompt_dir else None)


def _run_one(cfg: CliConfig, archive: Path, run_dir: Path):
    tree = extract_archive(archive)
    scope = resolve_scope(tree)
    gateway = build_gateway(cfg)
    toolbox = build_toolbox(cfg, run_dir / "sandbox")
    outcome = run_analysis(scope, _analysis_config(cfg, run_dir), gateway,
                           toolbox, tree=tree)
    return outcome


# --- commands ------------------------------------------------------------------------

_CONFIG_OPTIONS = [
    click.option("--config", "config_file", type=click.Path(), default=None,
                 help="Flat key=value configuration file."),
    click.option("--set", "set_overrides", multiple=True, metavar="KEY=VALUE",
                 help="Override any config key (repeatable)."),
]


def _with_config_options(fn):
    for option in reversed(_CONFIG_OPTIONS):
        fn = option(fn)
    return fn


def _collect_overrides(set_overrides: tuple, **direct) -> dict:
    overrides = {}
    for item in set_overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    overrides.update({k: v for k, v in direct.items() if v is not None})
    return overrides


def _load_or_exit(config_file, set_overrides, **direct) -> CliConfig:
    try:
        cfg = load_config(config_file,
                          _collect_overrides(set_overrides, **direct))
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    click.echo(render_effective_config(cfg), err=True)
    return cfg


@click.group()
def main():
    """Dissect suspicious Python package archives with supervised worker
    agents and deterministic tools."""


@main.command()
@click.argument("archive", type=click.Path())
@_with_config_options
@click.option("--run-dir", "run_dir_flag", type=click.Path(), default=None,
              help="Run directory (default: <run_root>/<archive-stem>-<ts>).")
@click.option("--budget", type=int, default=None,
              help="Supervisor iteration budget.")
@click.option("--timeout", type=float, default=None,
              help="Wall-clock timeout in seconds.")
def analyze(archive, config_file, set_overrides, run_dir_flag, budget, timeout):
    """Analyze one package archive and write its report."""
    cfg = _load_or_exit(config_file, set_overrides,
                        budget_total=budget, wall_timeout=timeout)
    archive_path = Path(archive)
    if not archive_path.exists():
        click.echo(f"configuration error: archive not found: {archive}",
                   err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    try:
        # trip wiring errors (bad backend/endpoint) before creating run dirs
        build_gateway(cfg)
    except ConfigError as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    if run_dir_flag:
        run_dir = Path(run_dir_flag)
    else:
        stamp = time.strftime("%Y%m%d-%H%M%S")
        run_dir = Path(cfg.run_root) / f"{archive_path.stem}-{stamp}"
    try:
        outcome = _run_one(cfg, archive_path, run_dir)
    except IngestError as exc:
        click.echo(f"ingest error: {exc}", err=True)
        sys.exit(EXIT_NOT_COMPLETED)
    click.echo(f"run directory: {run_dir}")
    if outcome.status == "completed" and outcome.report is not None:
        click.echo(f"verdict: {outcome.report.verdict} "
                   f"(confidence {outcome.report.confidence}, "
                   f"{outcome.wall_time:.1f}s)")
        sys.exit(VERDICT_EXIT_CODES.get(outcome.report.verdict,
                                        EXIT_NOT_COMPLETED))
    click.echo(f"analysis {outcome.status} after {outcome.wall_time:.1f}s; "
               "partial results attached in the run directory")
    sys.exit(EXIT_NOT_COMPLETED)


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(), required=True,
              help="Line-oriented manifest of (path, label, id) records.")
@_with_config_options
@click.option("--parallel", type=int, default=10, show_default=True,
              help="Maximum analyses in flight.")
@click.option("--max-trials", type=int, default=3, show_default=True,
              help="Retries per package for timeout outcomes.")
@click.option("--records", "records_path", type=click.Path(), default=None,
              help="Trial-record log (appended; enables resuming).")
def batch(manifest_path, config_file, set_overrides, parallel, max_trials,
          records_path):
    """Run a batch evaluation over a labeled manifest."""
    cfg = _load_or_exit(config_file, set_overrides)
    try:
        manifest = evaluation.load_manifest(manifest_path)
        build_gateway(cfg)
    except (evaluation.ManifestError, ConfigError, OSError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    records_path = records_path or (Path(cfg.run_root) / "trial_records.jsonl")
    Path(cfg.run_root).mkdir(parents=True, exist_ok=True)

    def analysis_fn(entry, trial):
        run_dir = Path(cfg.run_root) / f"{entry.package_id}-t{trial}"
        outcome = _run_one(cfg, Path(entry.path), run_dir)
        if outcome.status == "completed" and outcome.report is not None:
            return outcome.report.verdict, outcome.wall_time
        return outcome.status, outcome.wall_time

    records = evaluation.run_batch(manifest, analysis_fn,
                                   max_parallel=parallel,
                                   max_trials=max_trials,
                                   records_path=records_path)
    click.echo(f"{len(records)} trial records in {records_path}")
    summary = evaluation.compute_metrics(records, manifest)
    click.echo(evaluation.metrics_to_document(summary))


@main.command()
@click.option("--records", "records_path", type=click.Path(), required=True)
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--out", "out_path", type=click.Path(), default=None,
              help="Also write the metrics document to this path.")
def metrics(records_path, manifest_path, out_path):
    """Compute detection metrics from persisted trial records."""
    try:
        manifest = evaluation.load_manifest(manifest_path)
        records = evaluation.load_records(records_path)
    except (evaluation.ManifestError, OSError, json.JSONDecodeError) as exc:
        click.echo(f"configuration error: {exc}", err=True)
        sys.exit(EXIT_CONFIG_ERROR)
    try:
        summary = evaluation.compute_metrics(records, manifest)
    except evaluation.IncompleteRecordsError as exc:
        click.echo(str(exc), err=True)
        sys.exit(1)
    document = evaluation.metrics_to_document(summary)
    click.echo(document)
    if out_path:
        Path(out_path).write_text(document, encoding="utf-8")


@main.command()
@click.argument("run_dir", type=click.Path())
def inspect(run_dir):
    """Summarize a run directory without mutating it."""
    root = Path(run_dir)
    checkpoint = root / "state.json"
    if not root.is_dir() or not checkpoint.exists():
        click.echo(f"corrupt run: no checkpoint at {checkpoint}", err=True)
        sys.exit(1)
    try:
        state = read_checkpoint(checkpoint)
    except Exception as exc:
        click.echo(f"corrupt run: {exc}", err=True)
        sys.exit(1)
    click.echo(f"run: {root}")
    click.echo(f"package: {state.scope.package_name} "
               f"{state.scope.package_version}")
    click.echo(f"phase: {state.phase}")
    click.echo(f"budget: {state.budget.used}/{state.budget.total} used")
    click.echo(f"tasks executed: {len(state.task_log)}")
    click.echo(f"findings: {len(state.findings)}")
    for name in ("chat_trace.jsonl", "tool_trace.jsonl"):
        trace = root / name
        if trace.exists():
            entries = sum(1 for line in
                          trace.read_text(encoding="utf-8").splitlines()
                          if line.strip())
            click.echo(f"{name}: {entries} entries")
    outcome_file = root / "outcome.json"
    if outcome_file.exists():
        outcome = json.loads(outcome_file.read_text(encoding="utf-8"))
        click.echo(f"status: {outcome['status']} "
                   f"({outcome['wall_time_s']}s)")
        if outcome.get("verdict"):
            click.echo(f"verdict: {outcome['verdict']}")
        if outcome.get("partial_results_attached"):
            click.echo("partial results attached (flag for manual review)")
    else:
        click.echo("status: in progress or interrupted")


if __name__ == "__main__":
    main()
