"""Append-only JSONL event log, snapshots, and state reconstruction.

Layout per experiment:

    <data_dir>/<experiment_id>/config.json
    <data_dir>/<experiment_id>/events.jsonl
    <data_dir>/<experiment_id>/snapshots/<seq>.json

Replay folds every record through the same transition function used
live, so the reconstructed state matches the live state exactly. A
snapshot plus the log tail is equivalent to a full replay.
"""
from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Callable, Iterator

from .experiment import ExperimentConfig, ExperimentState

SNAPSHOT_INTERVAL = 10_000


class LogError(RuntimeError):
    """Raised on sequence gaps, malformed records, or bad snapshots."""


def _dump(doc: dict) -> str:
    return json.dumps(doc, separators=(",", ":"), sort_keys=True)


class EventLog:
    """Single-appender JSONL log with contiguous sequence numbers."""

    def __init__(self, path: Path):
        self.path = Path(path)
        self.last_seq = 0
        if self.path.exists():
            for record, _pos in iter_records(self.path):
                self.last_seq = record["seq"]
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._file = open(self.path, "a", encoding="utf-8", newline="\n")

    def append(self, record: dict) -> int:
        if record["seq"] != self.last_seq + 1:
            raise LogError(
                f"sequence gap: got {record['seq']}, "
                f"expected {self.last_seq + 1}"
            )
        self._file.write(_dump(record) + "\n")
        self._file.flush()
        self.last_seq = record["seq"]
        return record["seq"]

    def sync(self) -> None:
        self._file.flush()
        os.fsync(self._file.fileno())

    def close(self) -> None:
        if not self._file.closed:
            self._file.flush()
            self._file.close()

    def __enter__(self) -> "EventLog":
        return self

    def __exit__(self, *exc) -> None:
        self.close()


def iter_records(path: Path) -> Iterator[tuple[dict, int]]:
    """Yield (record, line_number); stop at the first corrupt record."""
    expected = 1
    with open(path, encoding="utf-8") as handle:
        for line_number, line in enumerate(handle, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                record = json.loads(stripped)
            except json.JSONDecodeError:
                # Truncated tail (e.g. crash mid-write): replay stops here.
                return
            if record.get("seq") != expected:
                raise LogError(
                    f"line {line_number}: sequence {record.get('seq')}, "
                    f"expected {expected}"
                )
            yield record, line_number
            expected += 1


def replay(
    log_path: Path,
    config: ExperimentConfig,
    up_to_seq: int | None = None,
    sink: Callable[[dict], None] | None = None,
) -> ExperimentState:
    """Reconstruct experiment state by folding the log."""
    state = ExperimentState(config)
    found = False
    for record, _line in iter_records(log_path):
        if up_to_seq is not None and record["seq"] > up_to_seq:
            break
        state.apply(record)
        found = True
    if not found:
        raise LogError(f"{log_path}: empty log, no experiment_created record")
    state.sink = sink
    return state


def write_snapshot(directory: Path, state: ExperimentState) -> Path:
    """Write a checksummed snapshot named by the next expected sequence."""
    directory.mkdir(parents=True, exist_ok=True)
    body = _dump(state.to_snapshot())
    doc = {
        "checksum": hashlib.sha256(body.encode("utf-8")).hexdigest(),
        "state": json.loads(body),
    }
    path = directory / f"{state.next_seq - 1:012d}.json"
    tmp = path.with_suffix(".tmp")
    tmp.write_text(_dump(doc) + "\n", encoding="utf-8")
    os.replace(tmp, path)
    return path


def read_snapshot(path: Path) -> dict:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    body = _dump(doc["state"])
    if hashlib.sha256(body.encode("utf-8")).hexdigest() != doc["checksum"]:
        raise LogError(f"{path}: snapshot checksum mismatch")
    return doc["state"]


def latest_snapshot(directory: Path) -> Path | None:
    if not directory.is_dir():
        return None
    candidates = sorted(directory.glob("*.json"))
    return candidates[-1] if candidates else None


def restore(
    config: ExperimentConfig,
    snapshot: dict,
    log_path: Path,
    sink: Callable[[dict], None] | None = None,
) -> ExperimentState:
    """Rebuild state from a snapshot plus the log records past it."""
    state = ExperimentState.from_snapshot(config, snapshot)
    last_applied = state.next_seq - 1
    log_head = 0
    for record, _line in iter_records(log_path):
        log_head = record["seq"]
        if record["seq"] > last_applied:
            state.apply(record)
    if last_applied > log_head:
        raise LogError(
            f"snapshot at sequence {last_applied} is newer than the log "
            f"head {log_head}"
        )
    state.sink = sink
    return state


class ExperimentStore:
    """Directory-per-experiment persistence root."""

    def __init__(self, data_dir: Path):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)

    def experiment_ids(self) -> list[str]:
        return sorted(
            p.name
            for p in self.data_dir.iterdir()
            if p.is_dir() and (p / "config.json").exists()
        )

    def experiment_dir(self, experiment_id: str) -> Path:
        return self.data_dir / experiment_id

    def log_path(self, experiment_id: str) -> Path:
        return self.experiment_dir(experiment_id) / "events.jsonl"

    def snapshot_dir(self, experiment_id: str) -> Path:
        return self.experiment_dir(experiment_id) / "snapshots"

    def save_config(self, experiment_id: str, config: ExperimentConfig) -> None:
        directory = self.experiment_dir(experiment_id)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / "config.json"
        path.write_text(
            json.dumps(config.to_document(), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )

    def load_config(self, experiment_id: str) -> ExperimentConfig:
        path = self.experiment_dir(experiment_id) / "config.json"
        return ExperimentConfig.from_document(
            json.loads(path.read_text(encoding="utf-8"))
        )

    def load_state(
        self,
        experiment_id: str,
        sink: Callable[[dict], None] | None = None,
    ) -> ExperimentState:
        """Restore from the latest valid snapshot plus the log tail.

        Falls back to a full replay when the snapshot is corrupt.
        """
        config = self.load_config(experiment_id)
        log_path = self.log_path(experiment_id)
        if not log_path.exists():
            state = ExperimentState(config, sink=sink)
            return state
        snapshot_path = latest_snapshot(self.snapshot_dir(experiment_id))
        if snapshot_path is not None:
            try:
                snapshot = read_snapshot(snapshot_path)
                return restore(config, snapshot, log_path, sink=sink)
            except LogError:
                pass
        try:
            return replay(log_path, config, sink=sink)
        except LogError:
            return ExperimentState(config, sink=sink)
