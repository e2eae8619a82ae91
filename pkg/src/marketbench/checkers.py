"""Offline correctness checkers over the audit log and measurement stream.

Every checker is a pure function of its inputs: re-running it never
changes the result, and none of them touch live service state. Each one
returns a list of violation records (dicts), so the report can both
count and sample them.
"""

from __future__ import annotations

import math

from .domain import InvalidInputError

DEFAULT_REQUIRED_PAIRS = (
    ("PaymentProcessed", "ShipmentCreated"),
    ("ShipmentCreated", "PackageDelivered"),
)

TERMINAL_FAILED = "PAYMENT_FAILED"
EXAMINED_OUTCOMES = frozenset({"aborted", "timed_out"})


class EmptyReportError(InvalidInputError):
    pass


def nearest_rank(values: list, p: float):
    """Nearest-rank percentile (no interpolation): the ceil(p/100*n)-th
    smallest value."""
    if not values:
        raise EmptyReportError("no values for percentile")
    ordered = sorted(values)
    rank = max(1, math.ceil(p / 100.0 * len(ordered)))
    return ordered[rank - 1]


def compute_performance(measurements: list[dict], logical_ticks: int | None = None,
                        wall_seconds: float | None = None) -> dict:
    """Throughput plus nearest-rank latency percentiles per transaction
    type. Logical figures are deterministic; wall figures appear only
    when a wall window is supplied."""
    if not measurements:
        raise EmptyReportError("empty measurement stream")
    matched = [m for m in measurements
               if m.get("outcome") in ("committed", "payment_failed")]
    by_type: dict[str, list[dict]] = {}
    for m in measurements:
        by_type.setdefault(m["type"], []).append(m)
    per_type = {}
    for ttype, ms in sorted(by_type.items()):
        ticks = [m["latency_ticks"] for m in ms]
        per_type[ttype] = {
            "count": len(ms),
            "matched": sum(1 for m in ms
                           if m.get("outcome") in ("committed", "payment_failed")),
            "latency_ticks": {
                "p50": nearest_rank(ticks, 50),
                "p90": nearest_rank(ticks, 90),
                "p99": nearest_rank(ticks, 99),
            },
        }
    if logical_ticks is None:
        logical_ticks = max(m["complete_logical"] for m in measurements) - \
            min(m["submit_logical"] for m in measurements)
    result = {
        "matched": len(matched),
        "logical_ticks": logical_ticks,
        "throughput_per_kilotick": (
            round(1000.0 * len(matched) / logical_ticks, 6) if logical_ticks else 0.0
        ),
        "per_type": per_type,
    }
    if wall_seconds is not None:
        wall_per_type = {}
        for ttype, ms in sorted(by_type.items()):
            secs = [m["latency_seconds"] for m in ms if "latency_seconds" in m]
            if secs:
                wall_per_type[ttype] = {
                    "p50_ms": nearest_rank(secs, 50) * 1000.0,
                    "p90_ms": nearest_rank(secs, 90) * 1000.0,
                    "p99_ms": nearest_rank(secs, 99) * 1000.0,
                }
        result["wall"] = {
            "seconds": wall_seconds,
            "throughput_tps": len(matched) / wall_seconds if wall_seconds else 0.0,
            "per_type": wall_per_type,
        }
    return result


def _mutations(entries: list[dict]):
    for e in entries:
        if e["kind"] == "state-mutation":
            yield e


def outcome_map(measurements: list[dict]) -> dict[int, str]:
    return {m["tid"]: m.get("outcome", "") for m in measurements}


def check_atomicity(entries: list[dict], outcomes: dict[int, str]) -> list[dict]:
    """All-or-nothing: an aborted or timed-out transaction must leave no
    net state change once saga compensations are netted out; a committed
    transaction's atomic block must not interleave with foreign writes."""
    violations = []
    examined = {tid for tid, out in outcomes.items() if out in EXAMINED_OUTCOMES}
    stock_net: dict[tuple[int, str], list[int]] = {}
    cart_last: dict[tuple[int, str], dict | None] = {}
    cart_first_before: dict[tuple[int, str], dict | None] = {}
    order_last: dict[tuple[int, str], dict] = {}
    commit_times: dict[int, list[int]] = {}
    all_mutation_times: list[int] = []

    for e in _mutations(entries):
        tid = e["tid"]
        all_mutation_times.append(e["logical_time"])
        if e.get("extra", {}).get("txn_phase") == "commit":
            commit_times.setdefault(tid, []).append(e["logical_time"])
        if tid not in examined:
            continue
        store, key = e["store"], e["key"]
        if store == "stock":
            net = stock_net.setdefault((tid, key), [0, 0])
            before, after = e.get("before") or {}, e.get("after") or {}
            net[0] += after.get("qty_available", 0) - before.get("qty_available", 0)
            net[1] += after.get("qty_reserved", 0) - before.get("qty_reserved", 0)
        elif store == "carts":
            ck = (tid, key)
            if ck not in cart_first_before:
                cart_first_before[ck] = e.get("before")
            cart_last[ck] = e.get("after")
        elif store == "orders":
            order_last[(tid, key)] = e.get("after") or {}

    for (tid, key), (d_avail, d_res) in sorted(stock_net.items()):
        if d_avail != 0 or d_res != 0:
            violations.append({
                "check": "atomicity", "kind": "stock_residue", "tid": tid,
                "key": key, "net_available": d_avail, "net_reserved": d_res,
            })
    for (tid, key), after in sorted(cart_last.items()):
        first = cart_first_before.get((tid, key))
        clean = after is not None and after.get("status") == "OPEN" and not after.get("items")
        unchanged = first == after
        if not (clean or unchanged):
            violations.append({
                "check": "atomicity", "kind": "cart_residue", "tid": tid,
                "key": key, "final": after,
            })
    for (tid, key), after in sorted(order_last.items()):
        if after.get("status") != TERMINAL_FAILED:
            violations.append({
                "check": "atomicity", "kind": "order_residue", "tid": tid,
                "key": key, "status": after.get("status"),
            })

    # TRANSACTIONAL visibility: each commit block must be contiguous
    commit_sorted = sorted(all_commit_mutations)
    position = {lt: i for i, (lt, _) in enumerate(commit_sorted)}
    for tid, times in sorted(commit_times.items()):
        if len(times) < 2:
            continue
        idxs = sorted(position[t] for t in times)
        if idxs[-1] - idxs[0] != len(idxs) - 1:
            violations.append({
                "check": "atomicity", "kind": "interleaved_commit", "tid": tid,
                "times": [min(times), max(times)],
            })
    return violations


def check_replication(entries: list[dict]) -> list[dict]:
    """Causal anomalies: a cart replica cell whose applied version goes
    backward. Convergence anomalies: at quiescence the replica disagrees
    with the product source."""
    violations = []
    replica_version: dict[str, int] = {}
    replica_active: dict[str, bool] = {}
    product_version: dict[str, int] = {}
    product_active: dict[str, bool] = {}
    for e in _mutations(entries):
        store, key = e["store"], e["key"]
        after = e.get("after") or {}
        if store == "cart-replica":
            if e["op"] == "replica-apply":
                prev = replica_version.get(key)
                version = after.get("version", 0)
                if prev is not None and version < prev:
                    violations.append({
                        "check": "replication", "kind": "causal_anomaly",
                        "key": key, "applied_version": version,
                        "previous_version": prev,
                        "logical_time": e["logical_time"],
                    })
                replica_version[key] = version
            elif e["op"] == "replica-deactivate":
                replica_active[key] = False
            if "active" in after:
                replica_active[key] = after["active"]
        elif store == "products":
            product_version[key] = after.get("version", 0)
            product_active[key] = after.get("active", True)
    for key in sorted(product_version):
        p_active = product_active.get(key, True)
        r_active = replica_active.get(key, True)
        if p_active != r_active:
            violations.append({
                "check": "replication", "kind": "convergence_anomaly",
                "key": key, "field": "active",
                "replica": r_active, "source": p_active,
            })
        elif p_active and replica_version.get(key) != product_version[key]:
            violations.append({
                "check": "replication", "kind": "convergence_anomaly",
                "key": key, "field": "version",
                "replica": replica_version.get(key),
                "source": product_version[key],
            })
    return violations


def check_integrity(entries: list[dict]) -> list[dict]:
    """Stock items must always refer to products that existed when the
    stock row was created."""
    violations = []
    products_seen: set[str] = set()
    for e in _mutations(entries):
        store, key = e["store"], e["key"]
        if store == "products" and e.get("before") is None:
            products_seen.add(key)
        elif store == "stock" and e.get("before") is None:
            if key not in products_seen:
                violations.append({
                    "check": "integrity", "kind": "dangling_stock_item",
                    "key": key, "logical_time": e["logical_time"],
                })
    return violations


def check_snapshot(measurements: list[dict]) -> list[dict]:
    """The dashboard aggregate must equal the exact sum recomputed from
    the tuples returned with it."""
    mismatches = []
    for m in measurements:
        dash = m.get("dashboard")
        if not dash:
            continue
        total = 0
        for price, qty, voucher in dash["tuples"]:
            subtotal = price * qty
            total += subtotal - min(voucher, subtotal)
        if total != dash["aggregate"]:
            mismatches.append({
                "check": "snapshot", "kind": "aggregate_mismatch",
                "tid": m["tid"], "seller_id": dash["seller_id"],
                "aggregate": dash["aggregate"], "tuple_sum": total,
            })
    return mismatches


def check_causality(entries: list[dict],
                    required_pairs=DEFAULT_REQUIRED_PAIRS) -> list[dict]:
    """Payment-related events must precede shipment events. Checked two
    ways: globally per tid (a ShipmentCreated delivery with no earlier
    PaymentProcessed delivery for the same transaction) and per
    (consumer, entity) for every configured required pair."""
    violations = []
    first_pp_by_tid: dict[int, int] = {}
    shipment_deliveries: list[tuple[int, int, int]] = []
    per_consumer: dict[tuple[str, str], dict[str, int]] = {}
    for e in entries:
        if e["kind"] != "event-deliver":
            continue
        etype = e.get("extra", {}).get("event_type")
        lt = e["logical_time"]
        if etype == "PaymentProcessed":
            first_pp_by_tid.setdefault(e["tid"], lt)
        elif etype == "ShipmentCreated":
            shipment_deliveries.append((e["tid"], lt, e.get("event_id")))
        stream = (e["actor"], str(e.get("extra", {}).get("entity_key")))
        types = per_consumer.setdefault(stream, {})
        if etype not in types:
            types[etype] = lt
    for tid, lt, event_id in shipment_deliveries:
        first_pp = first_pp_by_tid.get(tid)
        if first_pp is None or first_pp > lt:
            violations.append({
                "check": "causality", "kind": "shipment_before_payment",
                "tid": tid, "event_id": event_id, "logical_time": lt,
            })
    for (consumer, entity), types in sorted(per_consumer.items()):
        for earlier, later in required_pairs:
            if earlier in types and later in types and types[later] < types[earlier]:
                violations.append({
                    "check": "causality", "kind": "required_pair_violation",
                    "consumer": consumer, "entity_key": entity,
                    "pair": [earlier, later],
                    "positions": [types[earlier], types[later]],
                })
    return violations


def check_stock_conservation(entries: list[dict]) -> list[dict]:
    """Replay: initial availability equals final available plus final
    reserved plus everything confirmed, for every product."""
    violations = []
    initial: dict[str, int] = {}
    final: dict[str, dict] = {}
    confirmed: dict[str, int] = {}
    for e in _mutations(entries):
        if e["store"] != "stock":
            continue
        key = e["key"]
        if e.get("before") is None:
            initial[key] = (e.get("after") or {}).get("qty_available", 0)
        final[key] = e.get("after") or {}
        if e["op"] == "confirm":
            confirmed[key] = confirmed.get(key, 0) + e.get("extra", {}).get("qty", 0)
    for key in sorted(initial):
        end = final.get(key, {})
        lhs = initial[key]
        rhs = end.get("qty_available", 0) + end.get("qty_reserved", 0) + confirmed.get(key, 0)
        if lhs != rhs:
            violations.append({
                "check": "conservation", "kind": "stock_conservation",
                "key": key, "initial": lhs,
                "final_available": end.get("qty_available", 0),
                "final_reserved": end.get("qty_reserved", 0),
                "confirmed": confirmed.get(key, 0),
            })
    return violations


def run_all_checkers(entries: list[dict], measurements: list[dict],
                     required_pairs=DEFAULT_REQUIRED_PAIRS) -> dict[str, list[dict]]:
    outcomes = outcome_map(measurements)
    return {
        "atomicity_violations": check_atomicity(entries, outcomes),
        "replication_anomalies": check_replication(entries),
        "integrity_violations": check_integrity(entries),
        "snapshot_mismatches": check_snapshot(measurements),
        "causality_violations": check_causality(entries, required_pairs),
        "stock_conservation_violations": check_stock_conservation(entries),
    }
