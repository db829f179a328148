"""Persistent per-run records with resume support.

Records are appended, one JSON object per line, to ``records.jsonl`` in the
output directory. Only the parent process writes. On restart, records whose
spec hash matches are loaded and their runs are skipped.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

from ..errors import ConfigError

__all__ = ["RunRecord", "RecordStore"]

RECORD_FILE = "records.jsonl"


@dataclass(frozen=True)
class RunRecord:
    """Outcome of one run.

    Attributes
    ----------
    spec_hash : str
    run_id : str
        Stable identifier of the run within its experiment.
    seed : int
    scalars : dict
        JSON-serializable results (recovery step, final overlaps, labels).
    files : tuple of str
        Paths relative to the output directory (e.g. trajectories).
    wall : float
        Wall-clock seconds; never used in emitted tables.
    """

    spec_hash: str
    run_id: str
    seed: int
    scalars: dict
    files: tuple = field(default=())
    wall: float = 0.0

    def to_json(self) -> str:
        d = asdict(self)
        d["files"] = list(self.files)
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "RunRecord":
        d = json.loads(line)
        d["files"] = tuple(d.get("files", ()))
        return cls(**d)


class RecordStore:
    """Append-only store for one experiment's records."""

    def __init__(self, out: str | os.PathLike, spec_hash: str):
        self.out = Path(out)
        self.path = self.out / RECORD_FILE
        self.spec_hash = spec_hash
        self.records: dict[str, RunRecord] = {}
        self._load()

    def _load(self) -> None:
        if not self.path.exists():
            return
        with self.path.open() as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = RunRecord.from_json(line)
                except (json.JSONDecodeError, TypeError):
                    # a torn final line from an interrupted write
                    continue
                if rec.spec_hash == self.spec_hash and self._files_exist(rec):
                    self.records[rec.run_id] = rec

    def _files_exist(self, rec: RunRecord) -> bool:
        return all((self.out / f).exists() for f in rec.files)

    def __contains__(self, run_id: str) -> bool:
        return run_id in self.records

    def __len__(self) -> int:
        return len(self.records)

    def add(self, rec: RunRecord) -> None:
        if rec.spec_hash != self.spec_hash:
            raise ConfigError("record belongs to a different experiment")
        if not self._files_exist(rec):
            raise ConfigError(f"record {rec.run_id} references missing files")
        with self.path.open("a") as fh:
            fh.write(rec.to_json() + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        self.records[rec.run_id] = rec

    def sorted(self) -> list[RunRecord]:
        return [self.records[k] for k in sorted(self.records)]
