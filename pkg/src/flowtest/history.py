"""Persist per-test outcomes and durations across runs.

One JSON file keeps the latest record per test id; that is all the
failing-first, rerun-failed, and filter-enrichment workflows need. Writes
are atomic (write a temp file, then rename) so a crash mid-write leaves
the previous state intact. A missing or corrupt file loads as an empty
store with a warning, never as a crash.
"""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Optional

from .model import FlowtestError, OUTCOME_KINDS
from .runner import RunRecord

SCHEMA_VERSION = 1

#: Default location relative to a project root.
DEFAULT_RELATIVE_PATH = Path(".flowtest") / "history.json"


class HistoryStore:
    """Latest run record per test id, optionally persisted to one JSON file."""

    def __init__(self, storage_path: Optional[Path] = None,
                 latest: Optional[dict[str, RunRecord]] = None):
        self.storage_path = Path(storage_path) if storage_path else None
        self.latest: dict[str, RunRecord] = dict(latest or {})
        self.warnings: list[str] = []

    def record_run(self, records: Iterable[RunRecord]) -> "HistoryStore":
        """Fold one completed run's records in; most recent wins per id."""
        for record in records:
            previous = self.latest.get(record.test_id)
            if previous is None or record.finished_at >= previous.finished_at:
                self.latest[record.test_id] = record
        if self.storage_path is not None:
            self._persist()
        return self

    def last_outcome(self, test_id: str) -> Optional[str]:
        record = self.latest.get(test_id)
        return record.outcome if record else None

    def last_duration(self, test_id: str) -> Optional[float]:
        record = self.latest.get(test_id)
        return record.duration if record else None

    def _persist(self) -> None:
        assert self.storage_path is not None
        payload = {
            "version": SCHEMA_VERSION,
            "records": [
                {
                    "id": r.test_id,
                    "outcome": r.outcome,
                    "duration_s": r.duration,
                    "run_id": r.run_id,
                    "finished_at": r.finished_at,
                }
                for r in self.latest.values()
            ],
        }
        try:
            self.storage_path.parent.mkdir(parents=True, exist_ok=True)
            fd, temp_name = tempfile.mkstemp(dir=self.storage_path.parent,
                                             prefix=self.storage_path.name, suffix=".tmp")
            with os.fdopen(fd, "w", encoding="utf-8") as handle:
                json.dump(payload, handle, indent=1)
            os.replace(temp_name, self.storage_path)
        except OSError as exc:
            raise FlowtestError(f"cannot persist run history to {self.storage_path}: {exc}") from exc


def load(storage_path: Path | str) -> HistoryStore:
    """Load a store from disk; absent or unreadable data yields an empty store."""
    store = HistoryStore(storage_path=Path(storage_path))
    path = store.storage_path
    assert path is not None
    if not path.exists():
        return store
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
        if payload.get("version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported history version: {payload.get('version')!r}")
        for item in payload["records"]:
            if item["outcome"] not in OUTCOME_KINDS:
                raise ValueError(f"unknown outcome kind: {item['outcome']!r}")
            record = RunRecord(
                test_id=item["id"],
                outcome=item["outcome"],
                duration=float(item["duration_s"]),
                run_id=item["run_id"],
                finished_at=float(item["finished_at"]),
            )
            previous = store.latest.get(record.test_id)
            if previous is None or record.finished_at >= previous.finished_at:
                store.latest[record.test_id] = record
    except (ValueError, KeyError, TypeError, OSError) as exc:
        store.latest.clear()
        store.warnings.append(f"discarding unreadable run history at {path}: {exc}")
    return store


def project_store(project_root: Path | str) -> HistoryStore:
    return load(Path(project_root) / DEFAULT_RELATIVE_PATH)
