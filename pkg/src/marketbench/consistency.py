"""Switchable correctness regimes: transaction atomicity, product
replication semantics, and snapshot reads.

TRANSACTIONAL mode runs a checkout's mutations through a staged context
guarded by a per-key lock table; everything becomes visible in one
atomic commit block, or not at all. EVENTUAL_SAGA applies each step
immediately and relies on compensations. Replication to the cart's
price replica is either applied in arrival order (EVENTUAL) or gated
into version order with buffering (CAUSAL).
"""

from __future__ import annotations

import copy
import json
import threading
from dataclasses import dataclass
from enum import Enum

from .audit import AuditLog
from .fabric import LockBusyError, Ordering


class TransactionMode(str, Enum):
    EVENTUAL_SAGA = "EVENTUAL_SAGA"
    TRANSACTIONAL = "TRANSACTIONAL"


class ReplicationMode(str, Enum):
    EVENTUAL = "EVENTUAL"
    CAUSAL = "CAUSAL"


@dataclass
class ConsistencyConfig:
    transaction_mode: TransactionMode = TransactionMode.EVENTUAL_SAGA
    replication_mode: ReplicationMode = ReplicationMode.EVENTUAL
    dashboard_snapshot: bool = False
    event_ordering: Ordering = Ordering.UNORDERED

    def __post_init__(self):
        if isinstance(self.transaction_mode, str):
            self.transaction_mode = TransactionMode(self.transaction_mode)
        if isinstance(self.replication_mode, str):
            self.replication_mode = ReplicationMode(self.replication_mode)
        if isinstance(self.event_ordering, str):
            self.event_ordering = Ordering(self.event_ordering)

    def to_dict(self) -> dict:
        return {
            "transaction_mode": self.transaction_mode.value,
            "replication_mode": self.replication_mode.value,
            "dashboard_snapshot": self.dashboard_snapshot,
            "event_ordering": self.event_ordering.value,
        }


@dataclass
class ReplicaEntry:
    price: int
    version: int
    active: bool = True
    causal_token: int = 0

    def to_dict(self) -> dict:
        return {
            "price": self.price,
            "version": self.version,
            "active": self.active,
            "causal_token": self.causal_token,
        }


class KeyedStore:
    """Per-service keyed row store. All mutation goes through a context."""

    def __init__(self, name: str):
        self.name = name
        self.rows: dict = {}

    def get(self, key):
        return self.rows.get(key)

    def snapshot(self, key) -> dict | None:
        row = self.rows.get(key)
        if row is None:
            return None
        return row.to_dict() if hasattr(row, "to_dict") else dict(row)

    def __len__(self):
        return len(self.rows)

    def clear(self):
        self.rows.clear()


class LockTable:
    """Per-(store, key) exclusive locks owned by tids. Callers hold the
    world lock, so no internal locking is needed."""

    def __init__(self):
        self._owner: dict[tuple[str, object], int] = {}
        self._held: dict[int, set[tuple[str, object]]] = {}

    def owner(self, store: str, key) -> int | None:
        return self._owner.get((store, key))

    def acquire(self, tid: int, store: str, keys) -> None:
        """Acquire all keys or none; raises LockBusyError on conflict."""
        newly = []
        for key in sorted(keys):
            lk = (store, key)
            owner = self._owner.get(lk)
            if owner == tid:
                continue
            if owner is not None:
                for nk in newly:
                    del self._owner[nk]
                    self._held[tid].discard(nk)
                raise LockBusyError(f"{lk} held by tid {owner}")
            self._owner[lk] = tid
            self._held.setdefault(tid, set()).add(lk)
            newly.append(lk)

    def assert_free(self, tid: int, store: str, keys) -> None:
        """Raise if any key is owned by a different tid (no acquisition)."""
        for key in keys:
            owner = self._owner.get((store, key))
            if owner is not None and owner != tid:
                raise LockBusyError(f"({store}, {key}) held by tid {owner}")

    def release_all(self, tid: int) -> None:
        for lk in self._held.pop(tid, set()):
            del self._owner[lk]

    def held_count(self) -> int:
        return len(self._owner)

    def clear(self):
        self._owner.clear()
        self._held.clear()


def _snap(row) -> dict:
    return row.to_dict() if hasattr(row, "to_dict") else dict(row)


class DirectContext:
    """Applies writes immediately; every write is an audit entry."""

    staged = False

    def __init__(self, engine: "ConsistencyEngine", tid: int, actor: str):
        self.engine = engine
        self.tid = tid
        self.actor = actor

    def lock(self, store: KeyedStore, keys) -> None:
        # direct writes still may not stomp keys a transaction holds
        if self.engine.config.transaction_mode is TransactionMode.TRANSACTIONAL:
            self.engine.locks.assert_free(self.tid, store.name, keys)

    def read(self, store: KeyedStore, key):
        row = store.get(key)
        return copy.deepcopy(row) if row is not None else None

    def peek(self, store: KeyedStore, key):
        return store.get(key)

    def write(self, store: KeyedStore, key, row, op: str, **extra) -> None:
        before = store.snapshot(key)
        store.rows[key] = row
        self.engine.audit.mutation(self.actor, self.tid, store.name, key, op,
                                   before, _snap(row), **extra)

    def on_commit(self, fn) -> None:
        fn()


class TxnContext:
    """Stages writes privately; `commit` applies the op sequence as one
    contiguous audit block, `abort` discards everything."""

    staged = True

    def __init__(self, engine: "ConsistencyEngine", tid: int, actor: str):
        self.engine = engine
        self.tid = tid
        self.actor = actor
        self._staged: dict[tuple[str, object], object] = {}
        self._ops: list[tuple[KeyedStore, object, str, dict, dict, str]] = []
        self._hooks: list = []

    def lock(self, store: KeyedStore, keys) -> None:
        self.engine.locks.acquire(self.tid, store.name, keys)

    def read(self, store: KeyedStore, key):
        sk = (store.name, key)
        if sk in self._staged:
            return self._staged[sk]
        row = store.get(key)
        return copy.deepcopy(row) if row is not None else None

    def peek(self, store: KeyedStore, key):
        sk = (store.name, key)
        if sk in self._staged:
            return self._staged[sk]
        return store.get(key)

    def write(self, store: KeyedStore, key, row, op: str, **extra) -> None:
        self._staged[(store.name, key)] = row
        self._ops.append((store, key, op, _snap(row), extra, self.actor))

    def on_commit(self, fn) -> None:
        self._hooks.append(fn)

    def apply(self) -> None:
        audit = self.engine.audit
        running: dict[tuple[str, object], dict | None] = {}
        for store, key, op, after, extra, actor in self._ops:
            sk = (store.name, key)
            before = running[sk] if sk in running else store.snapshot(key)
            audit.mutation(actor, self.tid, store.name, key, op, before, after,
                           txn_phase="commit", **extra)
            running[sk] = after
        for store, key, op, after, extra, actor in self._ops:
            store.rows[key] = self._staged[(store.name, key)]
        for fn in self._hooks:
            fn()


class ConsistencyEngine:
    def __init__(self, config: ConsistencyConfig, audit: AuditLog,
                 world_lock: threading.RLock):
        self.config = config
        self.audit = audit
        self.world_lock = world_lock
        self.locks = LockTable()
        self.active: dict[int, TxnContext] = {}
        # 2PC protocol log: per-participant prepare records + decisions
        self.txn_log: list[str] = []
        # per-replica-key buffers for CAUSAL replication
        self._buffers: dict[object, dict[int, dict]] = {}
        self.buffer_window = 64

    @property
    def transactional(self) -> bool:
        return self.config.transaction_mode is TransactionMode.TRANSACTIONAL

    # -- transaction lifecycle -------------------------------------------

    def begin(self, tid: int, actor: str = "engine") -> None:
        if self.transactional:
            self.active[tid] = TxnContext(self, tid, actor)

    def context(self, tid: int, actor: str):
        ctx = self.active.get(tid)
        if ctx is not None:
            ctx = copy.copy(ctx)  # share staging, switch the audited actor
            ctx.actor = actor
            return ctx
        return DirectContext(self, tid, actor)

    def in_transaction(self, tid: int) -> bool:
        return tid in self.active

    def commit(self, tid: int) -> None:
        ctx = self.active.pop(tid, None)
        if ctx is None:
            return
        # phase 1: every participant validates its locks and force-logs the
        # staged write-set it promises to apply
        by_participant: dict[str, list] = {}
        for store, key, op, after, extra, actor in ctx._ops:
            if self.locks.owner(store.name, key) != tid:
                raise RuntimeError(f"commit {tid}: lost lock on {(store.name, key)}")
            by_participant.setdefault(store.name, []).append(
                {"key": str(key), "op": op, "after": after})
        for name in sorted(by_participant):
            self.txn_log.append(json.dumps(
                {"tid": tid, "phase": "prepare", "participant": name,
                 "ops": by_participant[name]},
                sort_keys=True, separators=(",", ":")))
        self.txn_log.append(json.dumps(
            {"tid": tid, "phase": "decision", "outcome": "commit"},
            sort_keys=True, separators=(",", ":")))
        # phase 2: apply and release
        ctx.apply()
        self.locks.release_all(tid)

    def abort(self, tid: int, reason: str) -> None:
        ctx = self.active.pop(tid, None)
        if ctx is None:
            return
        self.locks.release_all(tid)
        self.txn_log.append(json.dumps(
            {"tid": tid, "phase": "decision", "outcome": "abort", "reason": reason},
            sort_keys=True, separators=(",", ":")))
        self.audit.fault("engine", tid, None, fault="txn_abort", reason=reason)

    # -- product replication ---------------------------------------------

    def apply_replica_update(self, ctx, store: KeyedStore, key, update: dict) -> None:
        """Apply a PriceUpdated payload to a cart replica cell.

        EVENTUAL applies in arrival order (the channel is trusted), so an
        injected reordering shows up as a backward version step. CAUSAL
        buffers out-of-order versions and applies in version order.
        """
        if self.config.replication_mode is ReplicationMode.EVENTUAL:
            self._replica_write(ctx, store, key, update)
            return
        entry = ctx.peek(store, key)
        current = entry.version if entry is not None else 0
        if update["version"] <= current:
            return  # stale duplicate
        buf = self._buffers.setdefault(key, {})
        buf[update["version"]] = update
        while current + 1 in buf:
            self._replica_write(ctx, store, key, buf.pop(current + 1))
            current += 1
        if buf and max(buf) - current > self.buffer_window:
            self.audit.fault("cart", 0, None, fault="replication_stall",
                             key=str(key), waiting_for=current + 1)

    def _replica_write(self, ctx, store: KeyedStore, key, update: dict) -> None:
        entry = ctx.read(store, key)
        if entry is None:
            entry = ReplicaEntry(price=update["price"], version=update["version"],
                                 causal_token=update.get("event_id", 0))
        else:
            entry.price = update["price"]
            entry.version = update["version"]
            entry.causal_token = update.get("event_id", 0)
        ctx.write(store, key, entry, "replica-apply")

    def replica_deactivate(self, ctx, store: KeyedStore, key, version: int) -> None:
        entry = ctx.read(store, key)
        if entry is None:
            entry = ReplicaEntry(price=0, version=version, active=False)
        else:
            entry.active = False
        ctx.write(store, key, entry, "replica-deactivate")

    def reset(self) -> None:
        self.locks.clear()
        self.active.clear()
        self.txn_log.clear()
        self._buffers.clear()
