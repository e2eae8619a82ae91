"""Closed-loop benchmark driver: data generation, ingestion, warm-up,
workload submission, and asynchronous result matching by TID.

Workers own disjoint customer sessions, build transaction inputs from a
driver-local versioned product cache (never querying the services), and
pump the bus while waiting for their own outcome, so a single-worker run
is fully deterministic under a fixed seed.
"""

from __future__ import annotations

import bisect
import random
import threading
import time
from dataclasses import dataclass, field

from .domain import (
    CartItem,
    CustomerRecord,
    InvalidInputError,
    MarketError,
    ProductRecord,
    SellerRecord,
    StockItem,
)
from .services import (
    Marketplace,
    OUTCOME_ABORTED,
    OUTCOME_COMMITTED,
    OUTCOME_TIMED_OUT,
)

TRANSACTION_TYPES = ("checkout", "price_update", "product_delete",
                     "update_delivery", "dashboard")

DEFAULT_RATIO = {
    "checkout": 0.30,
    "price_update": 0.30,
    "product_delete": 0.02,
    "update_delivery": 0.03,
    "dashboard": 0.35,
}

MATCHED_OUTCOMES = frozenset({"committed", "payment_failed"})


class WorkloadExhaustedError(MarketError):
    pass


@dataclass
class WorkloadConfig:
    num_customers: int = 16
    num_sellers: int = 4
    products_per_seller: int = 25
    zipf_skew: float = 0.5
    transaction_ratio: dict = field(default_factory=lambda: dict(DEFAULT_RATIO))
    concurrency_level: int = 1
    transaction_count: int = 1000
    duration_seconds: float | None = None
    payment_failure_ratio: float = 0.0
    seed: int = 42
    warmup_transactions: int = 0
    price_range: tuple[int, int] = (100, 10_000)
    initial_stock: int = 100_000
    max_cart_items: int = 5
    max_item_qty: int = 3
    voucher_probability: float = 0.05
    timeout_seconds: float = 10.0

    def __post_init__(self):
        if isinstance(self.price_range, list):
            self.price_range = tuple(self.price_range)
        self.validate()

    def validate(self) -> None:
        if min(self.num_customers, self.num_sellers, self.products_per_seller) < 1:
            raise InvalidInputError("dataset counts must be positive")
        if self.zipf_skew < 0:
            raise InvalidInputError("zipf_skew must be >= 0")
        unknown = set(self.transaction_ratio) - set(TRANSACTION_TYPES)
        if unknown:
            raise InvalidInputError(f"unknown transaction types: {sorted(unknown)}")
        total = sum(self.transaction_ratio.values())
        if abs(total - 1.0) > 1e-9:
            raise InvalidInputError(f"transaction_ratio weights sum to {total}, not 1")
        if self.concurrency_level < 1:
            raise InvalidInputError("concurrency_level must be >= 1")
        if self.concurrency_level > self.num_customers:
            raise InvalidInputError(
                "concurrency_level must not exceed num_customers (session affinity)"
            )
        if not 0.0 <= self.payment_failure_ratio <= 1.0:
            raise InvalidInputError("payment_failure_ratio must be in [0, 1]")
        if self.transaction_count < 0:
            raise InvalidInputError("transaction_count must be >= 0")

    def to_dict(self) -> dict:
        return {
            "num_customers": self.num_customers,
            "num_sellers": self.num_sellers,
            "products_per_seller": self.products_per_seller,
            "zipf_skew": self.zipf_skew,
            "transaction_ratio": dict(sorted(self.transaction_ratio.items())),
            "concurrency_level": self.concurrency_level,
            "transaction_count": self.transaction_count,
            "payment_failure_ratio": self.payment_failure_ratio,
            "seed": self.seed,
            "warmup_transactions": self.warmup_transactions,
            "price_range": list(self.price_range),
            "initial_stock": self.initial_stock,
            "max_cart_items": self.max_cart_items,
            "max_item_qty": self.max_item_qty,
            "voucher_probability": self.voucher_probability,
            "timeout_seconds": self.timeout_seconds,
        }


@dataclass
class Dataset:
    products: list[ProductRecord]
    stock_items: list[StockItem]
    customers: list[CustomerRecord]
    sellers: list[SellerRecord]

    def to_dict(self) -> dict:
        return {
            "products": [p.to_dict() for p in self.products],
            "stock_items": [s.to_dict() for s in self.stock_items],
            "customers": [c.to_dict() for c in self.customers],
            "sellers": [s.to_dict() for s in self.sellers],
        }


def generate_data(config: WorkloadConfig) -> Dataset:
    """Deterministic synthetic catalog: every stock item references a
    product generated just before it."""
    rng = random.Random(config.seed)
    lo, hi = config.price_range
    products, stock_items = [], []
    for seller_id in range(1, config.num_sellers + 1):
        for product_id in range(1, config.products_per_seller + 1):
            price = rng.randint(lo, hi)
            freight = rng.randint(0, max(price // 10, 1))
            products.append(ProductRecord(
                seller_id=seller_id, product_id=product_id,
                name=f"product-{seller_id}-{product_id}",
                price=price, freight_value=freight,
            ))
            stock_items.append(StockItem(
                seller_id=seller_id, product_id=product_id,
                qty_available=config.initial_stock,
            ))
    customers = [CustomerRecord(customer_id=c, name=f"customer-{c}",
                                address=f"{rng.randint(1, 9999)} Market St")
                 for c in range(1, config.num_customers + 1)]
    sellers = [SellerRecord(seller_id=s, name=f"seller-{s}")
               for s in range(1, config.num_sellers + 1)]
    return Dataset(products, stock_items, customers, sellers)


class ZipfSampler:
    """Zipf(skew) over a stable rank ordering of product keys. Deleting a
    product re-points its ranks at a designated replacement, so the
    rank-frequency shape is unchanged."""

    def __init__(self, keys: list[tuple[int, int]], skew: float, seed: int):
        if not keys:
            raise InvalidInputError("sampler needs at least one product")
        rng = random.Random(seed ^ 0x5A)
        self.rank_table = list(keys)
        rng.shuffle(self.rank_table)
        self.skew = skew
        weights = [1.0 / (k ** skew) for k in range(1, len(keys) + 1)]
        total = sum(weights)
        acc, self._cdf = 0.0, []
        for w in weights:
            acc += w / total
            self._cdf.append(acc)
        self._cdf[-1] = 1.0
        self._ranks_of: dict[tuple[int, int], set[int]] = {}
        for rank, key in enumerate(self.rank_table):
            self._ranks_of.setdefault(key, set()).add(rank)
        self._active = set(keys)
        self._lock = threading.Lock()

    def sample(self, rng: random.Random) -> tuple[int, tuple[int, int]]:
        """Returns (rank, product key); rank is 1-based."""
        with self._lock:
            if not self._active:
                raise WorkloadExhaustedError("all products deleted")
            rank = bisect.bisect_left(self._cdf, rng.random())
            return rank + 1, self.rank_table[rank]

    def retire(self, key: tuple[int, int], rng: random.Random) -> tuple[int, int] | None:
        """Remove a deleted product, re-pointing its ranks at a replacement
        chosen from the remaining active products. Returns the replacement."""
        with self._lock:
            self._active.discard(key)
            if not self._active:
                return None
            replacement = rng.choice(sorted(self._active))
            ranks = self._ranks_of.pop(key, set())
            for rank in ranks:
                self.rank_table[rank] = replacement
            self._ranks_of.setdefault(replacement, set()).update(ranks)
            return replacement

    def active_count(self) -> int:
        with self._lock:
            return len(self._active)


class CacheEntry(tuple):
    """Immutable (price, version, active) triple; readers never lock."""
    __slots__ = ()

    def __new__(cls, price: int, version: int, active: bool = True):
        return super().__new__(cls, (price, version, active))

    @property
    def price(self) -> int:
        return self[0]

    @property
    def version(self) -> int:
        return self[1]

    @property
    def active(self) -> bool:
        return self[2]


class ProductInputCache:
    """Driver-local view of product inputs. Reads are lock-free; updates
    to one product are linearized by compare-and-swap."""

    def __init__(self):
        self._entries: dict[tuple[int, int], CacheEntry] = {}
        self._locks: dict[tuple[int, int], threading.RLock] = {}

    def prime(self, products: list[ProductRecord]) -> None:
        for p in products:
            self._entries[p.key] = CacheEntry(p.price, p.version, p.active)
            self._locks[p.key] = threading.RLock()

    def get(self, key: tuple[int, int]) -> CacheEntry | None:
        return self._entries.get(key)

    def cas_update(self, key: tuple[int, int], expected_version: int,
                   new_entry: CacheEntry) -> bool:
        """Replace the entry iff the current version matches; returns False
        (retry) on a version mismatch."""
        with self._locks[key]:
            current = self._entries[key]
            if current.version != expected_version:
                return False
            self._entries[key] = new_entry
            return True

    def submit_lock(self, key: tuple[int, int]) -> threading.RLock:
        return self._locks[key]

    def clear(self) -> None:
        self._entries.clear()
        self._locks.clear()


@dataclass
class RunStats:
    submitted: int = 0
    matched: int = 0
    aborted: int = 0
    timed_out: int = 0
    committed: int = 0
    payment_failed: int = 0
    orphan_results: int = 0
    duplicate_results: int = 0
    wall_seconds: float = 0.0
    logical_ticks: int = 0
    by_type: dict = field(default_factory=dict)

    @property
    def throughput_tps(self) -> float:
        return self.matched / self.wall_seconds if self.wall_seconds > 0 else 0.0

    def accounting_holds(self) -> bool:
        return self.submitted == self.matched + self.aborted + self.timed_out

    def to_dict(self) -> dict:
        return {
            "submitted": self.submitted,
            "matched": self.matched,
            "aborted": self.aborted,
            "timed_out": self.timed_out,
            "committed": self.committed,
            "payment_failed": self.payment_failed,
            "orphan_results": self.orphan_results,
            "duplicate_results": self.duplicate_results,
            "logical_ticks": self.logical_ticks,
            "by_type": {k: dict(v) for k, v in sorted(self.by_type.items())},
        }


class BenchDriver:
    """Owns one experiment lifecycle against a Marketplace instance."""

    def __init__(self, app: Marketplace, config: WorkloadConfig):
        self.app = app
        self.config = config
        self.cache = ProductInputCache()
        self.sampler: ZipfSampler | None = None
        self.dataset: Dataset | None = None
        self.measurements: list[dict] = []
        self._tid_lock = threading.Lock()
        self._next_tid = 1
        self._outcomes: dict[int, tuple[str, str | None]] = {}
        self._pending: dict[int, dict] = {}
        self._reg_lock = threading.Lock()
        self.stats = RunStats()
        self._failed = None
        app.outcome_sink = self._on_outcome

    # -- lifecycle --------------------------------------------------------

    def generate(self) -> Dataset:
        self.dataset = generate_data(self.config)
        return self.dataset

    def ingest(self, dataset: Dataset | None = None) -> None:
        dataset = dataset or self.dataset
        if dataset is None:
            raise InvalidInputError("no dataset generated")
        self.dataset = dataset
        self.app.ingest(dataset)
        self.cache.prime(dataset.products)
        self.sampler = ZipfSampler([p.key for p in dataset.products],
                                   self.config.zipf_skew, self.config.seed)

    def warmup(self, n: int | None = None) -> None:
        """Run n checkouts excluded from statistics."""
        n = self.config.warmup_transactions if n is None else n
        if n == 0:
            return
        rng = random.Random(self.config.seed ^ 0xBEEF)
        customers = list(range(1, self.config.num_customers + 1))
        for i in range(n):
            customer = customers[i % len(customers)]
            self._do_checkout(rng, customer, worker_id=-1, warmup=True)
        self.app.quiesce()

    def run_workload(self) -> RunStats:
        if self.sampler is None:
            raise InvalidInputError("ingest before running the workload")
        level = self.config.concurrency_level
        customers = list(range(1, self.config.num_customers + 1))
        sessions = [customers[i::level] for i in range(level)]
        total = self.config.transaction_count
        quotas = [total // level + (1 if i < total % level else 0) for i in range(level)]
        start_tick = self.app.audit.now()
        start_wall = time.perf_counter()
        threads = [
            threading.Thread(
                target=self._worker_loop, name=f"worker-{i}",
                args=(i, sessions[i], quotas[i]),
            )
            for i in range(level)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        if self._failed is not None:
            raise self._failed
        self.app.quiesce()
        self.stats.wall_seconds = time.perf_counter() - start_wall
        self.stats.logical_ticks = self.app.audit.now() - start_tick
        if self._pending:
            raise RuntimeError(f"descriptors leaked: {sorted(self._pending)}")
        if not self.stats.accounting_holds():
            raise RuntimeError("accounting identity violated")
        return self.stats

    def cleanup(self) -> None:
        self.app.reset()
        self.cache.clear()
        self.sampler = None
        with self._reg_lock:
            self._pending.clear()
            self._outcomes.clear()
            self._next_tid = 1

    # -- result matching --------------------------------------------------

    def next_tid(self) -> int:
        with self._tid_lock:
            tid = self._next_tid
            self._next_tid += 1
            return tid

    def _on_outcome(self, tid: int, status: str, reason: str | None) -> None:
        with self._reg_lock:
            if tid in self._outcomes:
                self.stats.duplicate_results += 1
                return
            self._outcomes[tid] = (status, reason)

    def match_result(self, tid: int, status: str, reason: str | None = None) -> dict | None:
        """Complete the descriptor for tid exactly once."""
        with self._reg_lock:
            desc = self._pending.pop(tid, None)
            if desc is None:
                self.stats.orphan_results += 1
                return None
            desc["outcome"] = status
            desc["reason"] = reason
            desc["complete_logical"] = self.app.audit.now()
            desc["complete_wall"] = time.perf_counter()
            desc["latency_ticks"] = desc["complete_logical"] - desc["submit_logical"]
            desc["latency_seconds"] = desc["complete_wall"] - desc["submit_wall"]
            if not desc.get("warmup"):
                self.measurements.append(desc)
                self._account(desc)
            return desc

    def _account(self, desc: dict) -> None:
        st = self.stats
        st.submitted += 1
        outcome = desc["outcome"]
        if outcome in MATCHED_OUTCOMES:
            st.matched += 1
            if outcome == "committed":
                st.committed += 1
            else:
                st.payment_failed += 1
        elif outcome == OUTCOME_TIMED_OUT:
            st.timed_out += 1
        else:
            st.aborted += 1
        bucket = st.by_type.setdefault(desc["type"], {"count": 0, "matched": 0})
        bucket["count"] += 1
        if outcome in MATCHED_OUTCOMES:
            bucket["matched"] += 1

    # -- submission -------------------------------------------------------

    def _begin(self, tid: int, ttype: str, worker_id: int, warmup: bool,
               inputs: dict) -> dict:
        desc = {
            "tid": tid,
            "type": ttype,
            "worker_id": worker_id,
            "warmup": warmup,
            "inputs": inputs,
            "submit_logical": self.app.audit.now(),
            "submit_wall": time.perf_counter(),
        }
        with self._reg_lock:
            self._pending[tid] = desc
        return desc

    def _worker_loop(self, worker_id: int, customers: list[int], quota: int) -> None:
        rng = random.Random((self.config.seed << 8) ^ (worker_id * 0x9E3779B1 + 1))
        names = sorted(self.config.transaction_ratio)
        weights = [self.config.transaction_ratio[n] for n in names]
        deadline = (time.monotonic() + self.config.duration_seconds
                    if self.config.duration_seconds else None)
        try:
            i = 0
            while True:
                if deadline is None:
                    if i >= quota:
                        break
                elif time.monotonic() >= deadline:
                    break
                ttype = rng.choices(names, weights=weights, k=1)[0]
                if ttype == "checkout":
                    customer = customers[i % len(customers)]
                    self._do_checkout(rng, customer, worker_id)
                elif ttype == "price_update":
                    self._do_price_update(rng, worker_id)
                elif ttype == "product_delete":
                    self._do_product_delete(rng, worker_id)
                elif ttype == "update_delivery":
                    self._do_update_delivery(rng, worker_id)
                else:
                    self._do_dashboard(rng, worker_id)
                i += 1
        except Exception as exc:   # worker panic aborts the experiment
            self._failed = exc

    # individual transaction types ----------------------------------------

    def _sample_active(self, rng: random.Random):
        for _ in range(64):
            rank, key = self.sampler.sample(rng)
            entry = self.cache.get(key)
            if entry is not None and entry.active:
                return rank, key, entry
        raise WorkloadExhaustedError("could not sample an active product")

    def _do_checkout(self, rng: random.Random, customer: int, worker_id: int,
                     warmup: bool = False) -> None:
        cfg = self.config
        k = rng.randint(1, cfg.max_cart_items)
        picks: dict[tuple[int, int], CartItem] = {}
        for _ in range(k):
            _, key, entry = self._sample_active(rng)
            qty = rng.randint(1, cfg.max_item_qty)
            voucher = 0
            if cfg.voucher_probability > 0 and rng.random() < cfg.voucher_probability:
                voucher = rng.randint(1, max(entry.price * qty // 2, 1))
            picks[key] = CartItem(
                seller_id=key[0], product_id=key[1],
                unit_price=entry.price, freight_value=0,
                quantity=qty, applied_price_version=entry.version,
                voucher=voucher,
            )
        approve = rng.random() >= cfg.payment_failure_ratio
        tid = self.next_tid()
        self._begin(tid, "checkout", worker_id, warmup,
                    {"customer_id": customer, "items": len(picks)})
        try:
            for item in picks.values():
                self.app.cart.add_item(customer, item, tid)
            self.app.cart.checkout(customer, {"approve": approve, "method": "card"}, tid)
        except MarketError as exc:
            self.app.cart.complete_checkout(customer, tid, False)
            self.match_result(tid, OUTCOME_ABORTED, reason=type(exc).__name__)
            return
        status, reason = self._await_outcome(tid)
        if status == OUTCOME_TIMED_OUT:
            self.app.recover_checkout(tid)
        self.app.cart.complete_checkout(customer, tid, status == OUTCOME_COMMITTED)
        self.match_result(tid, status, reason)

    def _await_outcome(self, tid: int) -> tuple[str, str | None]:
        deadline = time.monotonic() + self.config.timeout_seconds
        bus = self.app.bus
        while True:
            out = self._outcomes.get(tid)
            if out is not None:
                return out
            if not bus.has_pending_for(tid):
                out = self._outcomes.get(tid)
                if out is not None:
                    return out
                # the chain died without an outcome (e.g. a crashed consumer)
                return (OUTCOME_TIMED_OUT, "no_outcome")
            bus.step()
            if time.monotonic() > deadline:
                return (OUTCOME_TIMED_OUT, "deadline")

    def _do_price_update(self, rng: random.Random, worker_id: int) -> None:
        _, key, entry = self._sample_active(rng)
        lo, hi = self.config.price_range
        new_price = rng.randint(lo, hi)
        tid = self.next_tid()
        self._begin(tid, "price_update", worker_id, False,
                    {"key": list(key), "price": new_price})
        with self.cache.submit_lock(key):
            entry = self.cache.get(key)
            if not entry.active:
                self.match_result(tid, OUTCOME_ABORTED, reason="product_deleted")
                return
            swapped = self.cache.cas_update(
                key, entry.version, CacheEntry(new_price, entry.version + 1, True))
            if not swapped:
                self.match_result(tid, OUTCOME_ABORTED, reason="cas_retry")
                return
            try:
                self.app.product.update_price(key[0], key[1], new_price, tid)
            except MarketError as exc:
                self.match_result(tid, OUTCOME_ABORTED, reason=type(exc).__name__)
                return
        self.match_result(tid, OUTCOME_COMMITTED)

    def _do_product_delete(self, rng: random.Random, worker_id: int) -> None:
        _, key, entry = self._sample_active(rng)
        tid = self.next_tid()
        self._begin(tid, "product_delete", worker_id, False, {"key": list(key)})
        with self.cache.submit_lock(key):
            entry = self.cache.get(key)
            if not entry.active:
                self.match_result(tid, OUTCOME_ABORTED, reason="product_deleted")
                return
            self.cache.cas_update(key, entry.version,
                                  CacheEntry(entry.price, entry.version + 1, False))
            try:
                self.app.product.delete(key[0], key[1], tid)
            except MarketError as exc:
                self.match_result(tid, OUTCOME_ABORTED, reason=type(exc).__name__)
                return
        self.sampler.retire(key, rng)
        self.match_result(tid, OUTCOME_COMMITTED)

    def _do_update_delivery(self, rng: random.Random, worker_id: int) -> None:
        tid = self.next_tid()
        self._begin(tid, "update_delivery", worker_id, False, {})
        affected = self.app.shipment.update_delivery(tid)
        self.match_result(tid, OUTCOME_COMMITTED)
        self._pump_some(len(affected) * 2)

    def _do_dashboard(self, rng: random.Random, worker_id: int) -> None:
        seller = rng.randint(1, self.config.num_sellers)
        tid = self.next_tid()
        self._begin(tid, "dashboard", worker_id, False, {"seller_id": seller})
        resp = self.app.seller.dashboard(seller)
        desc = self.match_result(tid, OUTCOME_COMMITTED)
        if desc is not None:
            desc["dashboard"] = {
                "seller_id": seller,
                "aggregate": resp["aggregate"],
                "tuples": [[r["unit_price"], r["quantity"], r["voucher"]]
                           for r in resp["tuples"]],
            }

    def _pump_some(self, n: int) -> None:
        for _ in range(n):
            if not self.app.bus.step():
                break
