"""Batch evaluation harness: labeled manifests, timeout-retry trials, and
detection metrics.

Each package is analyzed until a non-timeout outcome or the trial cap is
reached; trial records persist incrementally so an interrupted batch resumes
without re-running finished packages. Metric conventions:

* the confusion matrix (tp/fp/fn/tn) counts trial-1 completions only;
* precision is computed over trial-1 completions and held fixed across k;
* recall@k counts a malicious package as detected when any of its first k
  trials completed with a malicious verdict, with still-unresolved packages
  kept in the denominator;
* ``needs_review`` and ``failed`` outcomes yield no verdict and are counted
  as timeout-equivalent.
"""

from __future__ import annotations

import json
import logging
import statistics
import threading
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path

logger = logging.getLogger("pkgsleuth.evaluation")

LABELS = ("malicious", "benign")
VERDICT_OUTCOMES = ("malicious", "benign")  # outcomes that resolve a package


class ManifestError(Exception):
    pass


class IncompleteRecordsError(Exception):
    def __init__(self, missing: list[str]):
        self.missing = missing
        super().__init__("records incomplete for packages: "
                         + ", ".join(missing))


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    package_id: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    provenance: str = ""

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.label not in LABELS:
                raise ManifestError(
                    f"package {e.package_id}: label {e.label!r} must be one "
                    f"of {LABELS}")
            if e.package_id in seen:
                raise ManifestError(f"duplicate package id {e.package_id!r}")
            seen.add(e.package_id)

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.package_id: e for e in self.entries}


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load a line-oriented manifest: one JSON record per line with
    ``path``, ``label``, and ``id`` fields; ``#`` lines are comments."""
    entries = []
    provenance = ""
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8")
                                  .splitlines(), 1):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            provenance += stripped.lstrip("# ") + "\n"
            continue
        try:
            rec = json.loads(stripped)
            entries.append(ManifestEntry(path=rec["path"], label=rec["label"],
                                         package_id=rec["id"]))
        except (json.JSONDecodeError, KeyError) as exc:
            raise ManifestError(f"{path}:{lineno}: bad manifest line: {exc}")
    return DatasetManifest(entries=entries, provenance=provenance.strip())


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    lines = [f"# {line}" for line in manifest.provenance.splitlines()]
    for e in manifest.entries:
        lines.append(json.dumps({"path": e.path, "label": e.label,
                                 "id": e.package_id}, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class TrialRecord:
    package_id: str
    trial: int  # 1-based, consecutive per package
    outcome: str  # malicious | benign | needs_review | timeout | failed
    wall_time: float


def load_records(path: str | Path) -> list[TrialRecord]:
    records = []
    p = Path(path)
    if not p.exists():
        return records
    for line in p.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        records.append(TrialRecord(package_id=rec["package_id"],
                                   trial=rec["trial"], outcome=rec["outcome"],
                                   wall_time=rec["wall_time"]))
    return records


class InFlightGauge:
    """Instrumented counter of concurrently running analyses."""

    def __init__(self):
        self.current = 0
        self.max_seen = 0
        self._lock = threading.Lock()

    def __enter__(self):
        with self._lock:
            self.current += 1
            self.max_seen = max(self.max_seen, self.current)
        return self

    def __exit__(self, *exc):
        with self._lock:
            self.current -= 1
        return False


def _terminal(records: list[TrialRecord], max_trials: int) -> bool:
    if not records:
        return False
    last = max(records, key=lambda r: r.trial)
    return last.outcome != "timeout" or last.trial >= max_trials


def run_batch(manifest: DatasetManifest, analysis_fn, *,
              max_parallel: int = 10, max_trials: int = 3,
              records_path: str | Path | None = None,
              gauge: InFlightGauge | None = None) -> list[TrialRecord]:
    """Analyze every manifest package with bounded parallelism and the
    timeout-retry policy.

    ``analysis_fn(entry, trial) -> (outcome, wall_time)`` runs one analysis;
    outcomes are the TrialRecord vocabulary. Per-package exceptions are
    recorded as ``failed`` trials and never abort the batch. With
    ``records_path``, records append incrementally and packages whose
    terminal record already exists are not re-run (resumability).
    """
    gauge = gauge or InFlightGauge()
    existing: dict[str, list[TrialRecord]] = {}
    if records_path:
        for rec in load_records(records_path):
            existing.setdefault(rec.package_id, []).append(rec)

    all_records: list[TrialRecord] = [r for recs in existing.values()
                                      for r in recs]
    write_lock = threading.Lock()

    def persist(record: TrialRecord) -> None:
        with write_lock:
            all_records.append(record)
            if records_path:
                with Path(records_path).open("a", encoding="utf-8") as fh:
                    fh.write(json.dumps(record.__dict__, sort_keys=True) + "\n")

    def analyze_package(entry: ManifestEntry) -> None:
        done = existing.get(entry.package_id, [])
        start_trial = max((r.trial for r in done), default=0) + 1
        for trial in range(start_trial, max_trials + 1):
            with gauge:
                try:
                    outcome, wall = analysis_fn(entry, trial)
                except Exception as exc:
                    logger.error("analysis of %s trial %d raised: %s",
                                 entry.package_id, trial, exc)
                    outcome, wall = "failed", 0.0
            persist(TrialRecord(package_id=entry.package_id, trial=trial,
                                outcome=outcome, wall_time=wall))
            if outcome != "timeout":
                return

    pending = [e for e in manifest.entries
               if not _terminal(existing.get(e.package_id, []), max_trials)]
    with ThreadPoolExecutor(max_workers=max_parallel) as pool:
        futures = [pool.submit(analyze_package, e) for e in pending]
        for future in as_completed(futures):
            future.result()
    return sorted(all_records, key=lambda r: (r.package_id, r.trial))


# --- metrics ---------------------------------------------------------------------

@dataclass
class MetricsSummary:
    tp: int
    fp: int
    fn: int
    tn: int
    timeouts_at_k: dict  # k -> {"malicious": n, "benign": n}
    recall_at_k: dict  # k -> float
    precision: float
    f1_at_k: dict  # k -> float
    median_wall_time: float
    total_packages: int = 0
    warnings: list = field(default_factory=list)


def _verdict_within(records: list[TrialRecord], k: int) -> str | None:
    """The package's verdict within its first k trials, if any trial
    resolved it (non-verdict outcomes never resolve)."""
    for rec in sorted(records, key=lambda r: r.trial):
        if rec.trial > k:
            break
        if rec.outcome in VERDICT_OUTCOMES:
            return rec.outcome
    return None


def compute_metrics(records: list[TrialRecord],
                    manifest: DatasetManifest) -> MetricsSummary:
    """Pure function of (records, manifest) producing the detection metrics.

    Precision is fixed at its trial-1 value across all k; recall@k uses the
    total number of labeled-malicious packages as its denominator, which
    keeps still-timing-out packages counted against recall.
    """
    by_package: dict[str, list[TrialRecord]] = {}
    for rec in records:
        by_package.setdefault(rec.package_id, []).append(rec)
    labels = {e.package_id: e.label for e in manifest.entries}

    missing = sorted(pid for pid in labels if pid not in by_package)
    if missing:
        raise IncompleteRecordsError(missing)
    for pid, recs in by_package.items():
        trials = sorted(r.trial for r in recs)
        if trials != list(range(1, len(trials) + 1)):
            raise ManifestError(
                f"package {pid}: trial indices {trials} are not consecutive "
                "from 1")

    max_k = max((r.trial for r in records), default=1)
    total_malicious = sum(1 for v in labels.values() if v == "malicious")

    tp = fp = fn = tn = 0
    for pid, label in labels.items():
        verdict = _verdict_within(by_package[pid], 1)
        if verdict is None:
            continue
        if label == "malicious":
            if verdict == "malicious":
                tp += 1
            else:
                fn += 1
        else:
            if verdict == "malicious":
                fp += 1
            else:
                tn += 1

    timeouts_at_k = {}
    recall_at_k = {}
    for k in range(1, max_k + 1):
        unresolved = {"malicious": 0, "benign": 0}
        detected = 0
        for pid, label in labels.items():
            verdict = _verdict_within(by_package[pid], k)
            if verdict is None:
                unresolved[label] += 1
            elif label == "malicious" and verdict == "malicious":
                detected += 1
        timeouts_at_k[k] = unresolved
        recall_at_k[k] = (detected / total_malicious
                          if total_malicious else 0.0)

    precision = tp / (tp + fp) if (tp + fp) else 0.0
    f1_at_k = {}
    for k, recall in recall_at_k.items():
        denom = precision + recall
        f1_at_k[k] = (2 * precision * recall / denom) if denom else 0.0

    wall_times = [r.wall_time for r in records]
    return MetricsSummary(
        tp=tp, fp=fp, fn=fn, tn=tn,
        timeouts_at_k=timeouts_at_k,
        recall_at_k=recall_at_k,
        precision=precision,
        f1_at_k=f1_at_k,
        median_wall_time=statistics.median(wall_times) if wall_times else 0.0,
        total_packages=len(labels),
    )


def metrics_to_document(summary: MetricsSummary) -> str:
    payload = {
        "confusion_at_trial_1": {"tp": summary.tp, "fp": summary.fp,
                                 "fn": summary.fn, "tn": summary.tn},
        "timeouts_at_k": {str(k): v for k, v in summary.timeouts_at_k.items()},
        "recall_at_k": {str(k): round(v, 5)
                        for k, v in summary.recall_at_k.items()},
        "precision": round(summary.precision, 5),
        "f1_at_k": {str(k): round(v, 5) for k, v in summary.f1_at_k.items()},
        "median_wall_time_s": round(summary.median_wall_time, 3),
        "total_packages": summary.total_packages,
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"
