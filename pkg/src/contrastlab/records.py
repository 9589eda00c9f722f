"""Metric records and the append-only JSONL record store."""

from __future__ import annotations

import fcntl
import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable


def now_timestamp() -> str:
    """UTC ISO timestamp; honours ``SOURCE_DATE_EPOCH`` for reproducible output."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclass(frozen=True)
class MetricRecord:
    experiment_id: str
    method: str
    protocol: str
    domain: str
    seed: int
    epoch: int | str
    metric: str
    value: float
    timestamp: str = ""

    @property
    def key(self) -> tuple:
        return (self.experiment_id, self.method, self.protocol, self.domain, self.seed, str(self.epoch), self.metric)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d) -> "MetricRecord":
        return cls(**d)


def make_records(value_map: dict, timestamp: str | None = None, **keys) -> list[MetricRecord]:
    ts = now_timestamp() if timestamp is None else timestamp
    return [MetricRecord(metric=m, value=float(v), timestamp=ts, **keys) for m, v in value_map.items()]


class RecordStore:
    """Line-delimited JSON records with unique-key upsert.

    Writers take an exclusive ``flock`` on a sidecar lock file, so concurrent
    workers serialise on the store. A record whose key already exists
    replaces the old line in place; new keys are appended.
    """

    def __init__(self, path):
        self.path = Path(path)

    def read(self) -> list[MetricRecord]:
        if not self.path.exists():
            return []
        with open(self.path) as fh:
            return [MetricRecord.from_dict(json.loads(line)) for line in fh if line.strip()]

    def upsert(self, records: Iterable[MetricRecord]) -> None:
        records = list(records)
        if not records:
            return
        self.path.parent.mkdir(parents=True, exist_ok=True)
        lock_path = self.path.with_suffix(self.path.suffix + ".lock")
        with open(lock_path, "w") as lock:
            fcntl.flock(lock, fcntl.LOCK_EX)
            try:
                existing = self.read()
                index = {r.key: i for i, r in enumerate(existing)}
                for r in records:
                    if r.key in index:
                        existing[index[r.key]] = r
                    else:
                        index[r.key] = len(existing)
                        existing.append(r)
                tmp = self.path.with_suffix(self.path.suffix + ".tmp")
                tmp.write_text("".join(r.to_json() + "\n" for r in existing))
                os.replace(tmp, self.path)
            finally:
                fcntl.flock(lock, fcntl.LOCK_UN)
