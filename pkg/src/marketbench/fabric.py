"""In-process asynchronous message bus connecting the services.

Transport is at-least-once with consumer-side dedup by event_id, so the
observable effect is exactly-once. Delivery order is per-stream FIFO in
UNORDERED mode and additionally gated on causal_deps in CAUSAL mode.
Reorder injection, delays, duplicate redelivery, and consumer crashes
are the fault surface used to seed anomalies for the checkers.
"""

from __future__ import annotations

import random
import threading
from dataclasses import dataclass, field
from enum import Enum

from .audit import AuditLog
from .domain import InvalidInputError


class EventType(str, Enum):
    PriceUpdated = "PriceUpdated"
    ProductDeleted = "ProductDeleted"
    StockReserved = "StockReserved"
    StockReserveFailed = "StockReserveFailed"
    InvoiceIssued = "InvoiceIssued"
    PaymentProcessed = "PaymentProcessed"
    PaymentFailed = "PaymentFailed"
    ShipmentCreated = "ShipmentCreated"
    PackageDelivered = "PackageDelivered"
    CartCheckedOut = "CartCheckedOut"


class Ordering(str, Enum):
    UNORDERED = "UNORDERED"
    CAUSAL = "CAUSAL"


@dataclass(frozen=True)
class Event:
    event_id: int
    tid: int
    event_type: EventType
    payload: dict
    causal_deps: frozenset[int]
    source_service: str
    target_service: str
    entity_key: str

    def to_dict(self) -> dict:
        return {
            "event_id": self.event_id,
            "tid": self.tid,
            "event_type": self.event_type.value,
            "payload": self.payload,
            "causal_deps": sorted(self.causal_deps),
            "source_service": self.source_service,
            "target_service": self.target_service,
            "entity_key": self.entity_key,
        }


@dataclass
class DeliveryConfig:
    ordering: Ordering = Ordering.UNORDERED
    max_artificial_delay: int = 0
    reorder_probability: float = 0.0
    seed: int = 0
    allow_reorder_with_causal: bool = False

    def __post_init__(self):
        if isinstance(self.ordering, str):
            self.ordering = Ordering(self.ordering)
        if not 0.0 <= self.reorder_probability <= 1.0:
            raise InvalidInputError("reorder_probability must be in [0, 1]")
        if (self.ordering is Ordering.CAUSAL and self.reorder_probability > 0
                and not self.allow_reorder_with_causal):
            raise InvalidInputError(
                "reorder injection under CAUSAL ordering requires allow_reorder_with_causal"
            )


class RoutingError(InvalidInputError):
    pass


class ConfigurationError(Exception):
    """Unsatisfiable delivery constraints (e.g. a causal_deps cycle)."""


class CrashFault(Exception):
    """Raised into a handler to simulate a consumer crash mid-transaction."""


FAULT_KINDS = ("drop_then_redeliver", "delay", "crash_consumer_mid_transaction")


@dataclass
class FaultRule:
    kind: str
    event_type: EventType | None = None
    target_service: str | None = None
    tid_mod: tuple[int, int] | None = None
    count: int | None = 1      # remaining firings; None means unlimited
    delay_steps: int = 10

    def matches(self, event: Event) -> bool:
        if self.count is not None and self.count <= 0:
            return False
        if self.event_type is not None and event.event_type is not self.event_type:
            return False
        if self.target_service is not None and event.target_service != self.target_service:
            return False
        if self.tid_mod is not None:
            m, r = self.tid_mod
            if event.tid % m != r:
                return False
        return True

    def consume(self) -> None:
        if self.count is not None:
            self.count -= 1


@dataclass
class _Pending:
    event: Event
    eligible_at: int
    attempts: int = 0
    drop_first: bool = False


class LockBusyError(Exception):
    """A handler could not acquire a key lock; the delivery is requeued."""


MAX_DELIVERY_ATTEMPTS = 10_000


class EventBus:
    """Single-process bus; one delivery at a time under the world lock."""

    def __init__(self, config: DeliveryConfig, audit: AuditLog,
                 world_lock: threading.RLock | None = None):
        self.config = config
        self.audit = audit
        self.world_lock = world_lock or threading.RLock()
        self._rng = random.Random(config.seed)
        self._pending: list[_Pending] = []
        self._delivered: set[int] = set()
        self._handlers: dict[tuple[str, EventType], object] = {}
        self._next_event_id = 1
        self._clock = 0
        self._fault_rules: list[FaultRule] = []
        self.crash_listener = None   # callable(event) -> None
        self.delivery_count = 0

    # -- wiring ---------------------------------------------------------

    def subscribe(self, target_service: str, event_type: EventType, handler) -> None:
        self._handlers[(target_service, event_type)] = handler

    def inject_fault(self, kind: str, *, event_type: EventType | None = None,
                     target_service: str | None = None,
                     tid_mod: tuple[int, int] | None = None,
                     count: int | None = 1, delay_steps: int = 10) -> FaultRule:
        if kind not in FAULT_KINDS:
            raise InvalidInputError(f"unknown fault kind: {kind}")
        rule = FaultRule(kind=kind, event_type=event_type,
                         target_service=target_service, tid_mod=tid_mod,
                         count=count, delay_steps=delay_steps)
        self._fault_rules.append(rule)
        return rule

    # -- publication ----------------------------------------------------

    def publish(self, tid: int, event_type: EventType, payload: dict,
                source_service: str, target_service: str, entity_key,
                causal_deps: set[int] | frozenset[int] = frozenset()) -> Event:
        with self.world_lock:
            if (target_service, event_type) not in self._handlers:
                raise RoutingError(
                    f"{target_service} is not subscribed to {event_type.value}"
                )
            event_id = self._next_event_id
            self._next_event_id += 1
            for dep in causal_deps:
                if dep >= event_id:
                    raise ConfigurationError(
                        f"event {event_id} depends on not-yet-published event {dep}"
                    )
            event = Event(
                event_id=event_id, tid=tid, event_type=event_type,
                payload=payload, causal_deps=frozenset(causal_deps),
                source_service=source_service, target_service=target_service,
                entity_key=str(entity_key),
            )
            eligible_at = self._clock
            if self.config.max_artificial_delay > 0:
                eligible_at += self._rng.randint(0, self.config.max_artificial_delay)
            drop_first = False
            for rule in self._fault_rules:
                if rule.kind == "delay" and rule.matches(event):
                    rule.consume()
                    eligible_at += rule.delay_steps
                    self.audit.fault("fabric", tid, event_id,
                                     fault="delay", delay_steps=rule.delay_steps)
                elif rule.kind == "drop_then_redeliver" and rule.matches(event):
                    rule.consume()
                    drop_first = True
            self._pending.append(_Pending(event, eligible_at, drop_first=drop_first))
            self.audit.publish(source_service, tid, event_id,
                               event_type=event_type.value,
                               target=target_service, entity_key=str(entity_key),
                               causal_deps=sorted(event.causal_deps))
            return event

    # -- delivery -------------------------------------------------------

    def _deps_met(self, event: Event) -> bool:
        return event.causal_deps <= self._delivered

    def _pick_index(self) -> int | None:
        """Choose the next pending index to deliver, honoring FIFO, delays
        and (in CAUSAL mode) causal_deps. Reorder injection may bypass the
        per-stream FIFO; it never bypasses delays, and bypasses causal_deps
        only in UNORDERED mode."""
        causal = self.config.ordering is Ordering.CAUSAL
        arrived = [
            i for i, pd in enumerate(self._pending)
            if pd.eligible_at <= self._clock
            and (not causal or self._deps_met(pd.event))
        ]
        if not arrived:
            return None
        if (self.config.reorder_probability > 0
                and self._rng.random() < self.config.reorder_probability):
            return self._rng.choice(arrived)
        head: dict[tuple, int] = {}
        for i in arrived:
            ev = self._pending[i].event
            stream = (ev.source_service, ev.target_service, ev.entity_key)
            if stream not in head or ev.event_id < self._pending[head[stream]].event.event_id:
                head[stream] = i
        # among FIFO heads, deliver in queue position order
        for i in arrived:
            ev = self._pending[i].event
            stream = (ev.source_service, ev.target_service, ev.entity_key)
            if head[stream] == i:
                return i
        return None

    def step(self) -> bool:
        """Deliver at most one event. Returns False only when the queue is
        empty (quiescence)."""
        with self.world_lock:
            if not self._pending:
                return False
            self._clock += 1
            idx = self._pick_index()
            if idx is None:
                if all(pd.eligible_at <= self._clock for pd in self._pending):
                    # nothing is maturing and nothing is deliverable
                    raise ConfigurationError("delivery stalled: unmet causal_deps")
                return True
            pd = self._pending.pop(idx)
            event = pd.event
            if event.event_id in self._delivered:
                self.audit.fault("fabric", event.tid, event.event_id,
                                 fault="duplicate_suppressed")
                return True
            if pd.drop_first:
                pd.drop_first = False
                pd.attempts += 1
                self._pending.append(pd)
                # model at-least-once: the retry plus a duplicate delivery
                self._pending.append(_Pending(event, self._clock))
                self.audit.fault("fabric", event.tid, event.event_id,
                                 fault="dropped_then_redelivered")
                return True
            for rule in self._fault_rules:
                if rule.kind == "crash_consumer_mid_transaction" and rule.matches(event):
                    # consumer dies before processing: the event is consumed,
                    # the handler never runs, the chain is cut
                    rule.consume()
                    self._delivered.add(event.event_id)
                    self.audit.fault(event.target_service, event.tid, event.event_id,
                                     fault="crash_consumer_mid_transaction",
                                     event_type=event.event_type.value)
                    if self.crash_listener is not None:
                        self.crash_listener(event)
                    return True
            handler = self._handlers[(event.target_service, event.event_type)]
            try:
                handler(event)
            except LockBusyError:
                pd.attempts += 1
                if pd.attempts > MAX_DELIVERY_ATTEMPTS:
                    raise ConfigurationError(
                        f"event {event.event_id} exceeded delivery attempts"
                    )
                self._pending.append(pd)
                return True
            self._delivered.add(event.event_id)
            self.delivery_count += 1
            self.audit.deliver(event.target_service, event.tid, event.event_id,
                               event_type=event.event_type.value,
                               source=event.source_service,
                               entity_key=event.entity_key,
                               attempts=pd.attempts)
            return True

    def drain(self, max_steps: int = 10_000_000) -> int:
        """Pump until quiescent; returns the number of steps taken."""
        steps = 0
        while self.step():
            steps += 1
            if steps >= max_steps:
                raise ConfigurationError("drain did not quiesce")
        return steps

    @property
    def pending_count(self) -> int:
        with self.world_lock:
            return len(self._pending)

    def has_pending_for(self, tid: int) -> bool:
        with self.world_lock:
            return any(pd.event.tid == tid for pd in self._pending)

    def reset(self) -> None:
        with self.world_lock:
            self._pending.clear()
            self._delivered.clear()
            self._fault_rules.clear()
            self._clock = 0
            self.delivery_count = 0
