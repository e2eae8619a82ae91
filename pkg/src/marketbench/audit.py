"""Append-only audit log of state mutations, event traffic, and faults.

Every entry gets a strictly increasing logical time from a single global
counter; that counter doubles as the benchmark's logical clock, so
latencies and record timestamps derived from it are reproducible
run-to-run. Checkers consume the log offline as plain dicts.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field

KIND_MUTATION = "state-mutation"
KIND_PUBLISH = "event-publish"
KIND_DELIVER = "event-deliver"
KIND_FAULT = "fault-injection"


@dataclass
class AuditEntry:
    logical_time: int
    actor: str
    kind: str
    tid: int
    event_id: int | None = None
    store: str | None = None
    key: str | None = None
    op: str | None = None
    before: dict | None = None
    after: dict | None = None
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "logical_time": self.logical_time,
            "actor": self.actor,
            "kind": self.kind,
            "tid": self.tid,
        }
        if self.event_id is not None:
            d["event_id"] = self.event_id
        if self.store is not None:
            d["store"] = self.store
        if self.key is not None:
            d["key"] = self.key
        if self.op is not None:
            d["op"] = self.op
        if self.before is not None:
            d["before"] = self.before
        if self.after is not None:
            d["after"] = self.after
        if self.extra:
            d["extra"] = self.extra
        return d


def key_str(key) -> str:
    """Canonical string form of a store key (ints or int tuples)."""
    if isinstance(key, tuple):
        return "/".join(str(k) for k in key)
    return str(key)


class AuditLog:
    """Thread-safe append-only log with a global logical clock."""

    def __init__(self):
        self._lock = threading.Lock()
        self.entries: list[AuditEntry] = []

    def now(self) -> int:
        """Current logical time (the next entry's timestamp)."""
        with self._lock:
            return len(self.entries)

    def _append(self, entry: AuditEntry) -> int:
        with self._lock:
            entry.logical_time = len(self.entries)
            self.entries.append(entry)
            return entry.logical_time

    def mutation(self, actor: str, tid: int, store: str, key, op: str,
                 before: dict | None, after: dict | None, **extra) -> int:
        return self._append(AuditEntry(
            logical_time=-1, actor=actor, kind=KIND_MUTATION, tid=tid,
            store=store, key=key_str(key), op=op, before=before, after=after,
            extra=dict(extra),
        ))

    def publish(self, actor: str, tid: int, event_id: int, **extra) -> int:
        return self._append(AuditEntry(
            logical_time=-1, actor=actor, kind=KIND_PUBLISH, tid=tid,
            event_id=event_id, extra=dict(extra),
        ))

    def deliver(self, actor: str, tid: int, event_id: int, **extra) -> int:
        return self._append(AuditEntry(
            logical_time=-1, actor=actor, kind=KIND_DELIVER, tid=tid,
            event_id=event_id, extra=dict(extra),
        ))

    def fault(self, actor: str, tid: int, event_id: int | None, **extra) -> int:
        return self._append(AuditEntry(
            logical_time=-1, actor=actor, kind=KIND_FAULT, tid=tid,
            event_id=event_id, extra=dict(extra),
        ))

    def to_dicts(self) -> list[dict]:
        with self._lock:
            return [e.to_dict() for e in self.entries]

    def save(self, path) -> None:
        """Write the log as line-delimited JSON, one entry per line."""
        with open(path, "w") as f:
            for e in self.to_dicts():
                f.write(json.dumps(e, sort_keys=True, separators=(",", ":")))
                f.write("\n")

    @staticmethod
    def load(path) -> list[dict]:
        with open(path) as f:
            return [json.loads(line) for line in f if line.strip()]
