"""The eight marketplace services as keyed, message-driven state machines.

Each service owns one or two keyed stores; cross-service effects travel
only as events on the bus (service-to-service) or synchronous commands
(client-to-service). Handlers acquire any key locks before touching
state so a busy lock requeues the delivery without side effects.
"""

from __future__ import annotations

import itertools
import threading

from .audit import AuditLog
from .consistency import (
    ConsistencyConfig,
    ConsistencyEngine,
    DirectContext,
    KeyedStore,
    ReplicaEntry,
)
from .domain import (
    Cart,
    CartItem,
    CartStatus,
    ConflictError,
    InvalidInputError,
    NotFoundError,
    OrderRecord,
    OrderStatus,
    IN_PROGRESS_STATUSES,
    ORDER_TRANSITIONS,
    Package,
    ShipmentRecord,
    ShipmentStatus,
    assemble_packages,
    compute_order_total,
    next_invoice_number,
    order_item_from_dict,
)
from .fabric import DeliveryConfig, EventBus, EventType

OUTCOME_COMMITTED = "committed"
OUTCOME_PAYMENT_FAILED = "payment_failed"
OUTCOME_ABORTED = "aborted"
OUTCOME_TIMED_OUT = "timed_out"

_STATUS_RANK = {
    OrderStatus.INVOICED: 0,
    OrderStatus.PAYMENT_PROCESSED: 1,
    OrderStatus.PAYMENT_FAILED: 1,
    OrderStatus.READY_FOR_SHIPMENT: 2,
    OrderStatus.IN_TRANSIT: 3,
    OrderStatus.DELIVERED: 4,
}


class CartService:
    name = "cart"

    def __init__(self, app: "Marketplace"):
        self.app = app
        self.carts = KeyedStore("carts")
        self.replica = KeyedStore("cart-replica")

    def _ctx(self, tid: int) -> DirectContext:
        return DirectContext(self.app.engine, tid, self.name)

    def add_item(self, customer_id: int, item: CartItem, tid: int = 0) -> None:
        with self.app.world_lock:
            ctx = self._ctx(tid)
            cart = ctx.read(self.carts, customer_id)
            if cart is None:
                cart = Cart(customer_id=customer_id)
            cart.upsert_item(item)  # raises ConflictError unless OPEN
            ctx.write(self.carts, customer_id, cart, "cart-add-item")

    def checkout(self, customer_id: int, payment_info: dict, tid: int) -> None:
        """Submit a checkout; the outcome arrives asynchronously under tid."""
        with self.app.world_lock:
            ctx = self._ctx(tid)
            cart = ctx.read(self.carts, customer_id)
            if cart is None or not cart.items:
                raise InvalidInputError(f"cart {customer_id} is empty")
            if cart.status is not CartStatus.OPEN:
                raise ConflictError(f"cart {customer_id} already checking out")
            priced = []
            for item in cart.items:
                entry = self.replica.get((item.seller_id, item.product_id))
                if entry is None or not entry.active:
                    self.app.outcome(tid, OUTCOME_ABORTED, reason="product_deleted")
                    return
                item.unit_price = entry.price
                item.applied_price_version = entry.version
                priced.append(item)
            cart.status = CartStatus.CHECKING_OUT
            ctx.write(self.carts, customer_id, cart, "cart-checkout-submit")
            self.app.engine.begin(tid)
            self.app.register_checkout(tid, customer_id)
            self.app.bus.publish(
                tid, EventType.CartCheckedOut,
                payload={
                    "customer_id": customer_id,
                    "items": [it.to_dict() for it in priced],
                    "payment_info": payment_info,
                },
                source_service=self.name, target_service="stock",
                entity_key=f"t{tid}",
            )

    def complete_checkout(self, customer_id: int, tid: int, success: bool) -> None:
        """Client-side acknowledgement closing the cart session."""
        with self.app.world_lock:
            ctx = self._ctx(tid)
            cart = ctx.read(self.carts, customer_id)
            if cart is None:
                return
            if cart.status is CartStatus.CHECKING_OUT:
                if success:
                    cart.status = CartStatus.CHECKED_OUT
                    ctx.write(self.carts, customer_id, cart, "cart-checked-out")
                ctx.write(self.carts, customer_id, Cart(customer_id=customer_id),
                          "cart-reset", outcome="committed" if success else "aborted")
            elif cart.items:
                # checkout rejected at submit time; clear the session
                ctx.write(self.carts, customer_id, Cart(customer_id=customer_id),
                          "cart-reset", outcome="aborted")

    # -- event handlers --------------------------------------------------

    def on_price_updated(self, event) -> None:
        p = event.payload
        key = (p["seller_id"], p["product_id"])
        ctx = self._ctx(event.tid)
        update = {"price": p["price"], "version": p["version"],
                  "event_id": event.event_id}
        self.app.engine.apply_replica_update(ctx, self.replica, key, update)

    def on_product_deleted(self, event) -> None:
        p = event.payload
        key = (p["seller_id"], p["product_id"])
        ctx = self._ctx(event.tid)
        self.app.engine.replica_deactivate(ctx, self.replica, key, p["version"])

    def on_stock_reserve_failed(self, event) -> None:
        # informational; the client closes the session via complete_checkout
        pass


class ProductService:
    name = "product"

    def __init__(self, app: "Marketplace"):
        self.app = app
        self.products = KeyedStore("products")
        self._last_event: dict[tuple[int, int], int] = {}

    def update_price(self, seller_id: int, product_id: int, new_price: int,
                     tid: int = 0) -> int:
        if new_price < 0:
            raise InvalidInputError("price must be non-negative")
        key = (seller_id, product_id)
        with self.app.world_lock:
            ctx = DirectContext(self.app.engine, tid, self.name)
            row = ctx.read(self.products, key)
            if row is None or not row.active:
                raise NotFoundError(f"product {key} not found or inactive")
            row.price = new_price
            row.version += 1
            ctx.write(self.products, key, row, "price-update")
            deps = {self._last_event[key]} if key in self._last_event else set()
            ev = self.app.bus.publish(
                tid, EventType.PriceUpdated,
                payload={"seller_id": seller_id, "product_id": product_id,
                         "price": new_price, "version": row.version},
                source_service=self.name, target_service="cart",
                entity_key=key, causal_deps=deps,
            )
            self._last_event[key] = ev.event_id
            return row.version

    def delete(self, seller_id: int, product_id: int, tid: int = 0) -> None:
        key = (seller_id, product_id)
        with self.app.world_lock:
            ctx = DirectContext(self.app.engine, tid, self.name)
            row = ctx.read(self.products, key)
            if row is None or not row.active:
                raise NotFoundError(f"product {key} not found or inactive")
            row.active = False
            row.version += 1
            ctx.write(self.products, key, row, "product-delete")
            deps = {self._last_event[key]} if key in self._last_event else set()
            payload = {"seller_id": seller_id, "product_id": product_id,
                       "version": row.version}
            self.app.bus.publish(tid, EventType.ProductDeleted, payload,
                                 source_service=self.name, target_service="stock",
                                 entity_key=key, causal_deps=deps)
            ev = self.app.bus.publish(tid, EventType.ProductDeleted, payload,
                                      source_service=self.name, target_service="cart",
                                      entity_key=key, causal_deps=deps)
            self._last_event[key] = ev.event_id


class StockService:
    name = "stock"

    def __init__(self, app: "Marketplace"):
        self.app = app
        self.stock = KeyedStore("stock")
        self.reservations: dict[int, dict] = {}

    def on_cart_checked_out(self, event) -> None:
        tid = event.tid
        payload = event.payload
        ctx = self.app.engine.context(tid, self.name)
        items = payload["items"]
        keys = [(it["seller_id"], it["product_id"]) for it in items]
        ctx.lock(self.stock, keys)
        failing = []
        for it in items:
            key = (it["seller_id"], it["product_id"])
            row = ctx.peek(self.stock, key)
            if row is None or not row.active:
                failing.append({"seller_id": key[0], "product_id": key[1],
                                "reason": "inactive"})
            elif row.qty_available < it["quantity"]:
                failing.append({"seller_id": key[0], "product_id": key[1],
                                "reason": "insufficient"})
        if failing:
            # all-or-nothing: no item is modified
            self.app.abort_checkout(tid, reason="stock")
            self.app.bus.publish(
                tid, EventType.StockReserveFailed,
                payload={"customer_id": payload["customer_id"], "failing": failing},
                source_service=self.name, target_service="cart",
                entity_key=payload["customer_id"],
                causal_deps={event.event_id},
            )
            return
        for it in items:
            key = (it["seller_id"], it["product_id"])
            row = ctx.read(self.stock, key)
            row.qty_available -= it["quantity"]
            row.qty_reserved += it["quantity"]
            row.version += 1
            ctx.write(self.stock, key, row, "reserve", qty=it["quantity"])
        self.reservations[tid] = {
            "items": {(it["seller_id"], it["product_id"]): it["quantity"] for it in items},
            "state": "held",
        }
        self.app.bus.publish(
            tid, EventType.StockReserved,
            payload=dict(payload, confirmed_items=items),
            source_service=self.name, target_service="order",
            entity_key=f"t{tid}", causal_deps={event.event_id},
        )

    def apply_confirm(self, tid: int, ctx) -> None:
        res = self.reservations.get(tid)
        if res is None or res["state"] != "held":
            self.app.record_orphan_compensation(tid, "confirm")
            return
        ctx.lock(self.stock, list(res["items"]))
        for key, qty in res["items"].items():
            row = ctx.read(self.stock, key)
            row.qty_reserved -= qty
            row.version += 1
            ctx.write(self.stock, key, row, "confirm", qty=qty)
        res["state"] = "confirmed"

    def apply_cancel(self, tid: int, ctx, compensation: bool = False) -> None:
        res = self.reservations.get(tid)
        if res is None or res["state"] != "held":
            self.app.record_orphan_compensation(tid, "cancel")
            return
        ctx.lock(self.stock, list(res["items"]))
        extra = {"compensation": True} if compensation else {}
        for key, qty in res["items"].items():
            row = ctx.read(self.stock, key)
            row.qty_reserved -= qty
            row.qty_available += qty
            row.version += 1
            ctx.write(self.stock, key, row, "cancel", qty=qty, **extra)
        res["state"] = "cancelled"

    def drop_reservation(self, tid: int) -> None:
        self.reservations.pop(tid, None)

    def on_payment_processed(self, event) -> None:
        ctx = self.app.engine.context(event.tid, self.name)
        self.apply_confirm(event.tid, ctx)

    def on_payment_failed(self, event) -> None:
        ctx = self.app.engine.context(event.tid, self.name)
        self.apply_cancel(event.tid, ctx)

    def on_product_deleted(self, event) -> None:
        p = event.payload
        key = (p["seller_id"], p["product_id"])
        ctx = self.app.engine.context(event.tid, self.name)
        ctx.lock(self.stock, [key])
        row = ctx.read(self.stock, key)
        if row is None or not row.active:
            return
        row.active = False
        row.version += 1
        ctx.write(self.stock, key, row, "deactivate")


class OrderService:
    name = "order"

    def __init__(self, app: "Marketplace"):
        self.app = app
        self.orders = KeyedStore("orders")
        self.order_by_tid: dict[int, int] = {}
        self.seller_index: dict[int, set[int]] = {}
        self._sequences: dict[int, int] = {}

    def on_stock_reserved(self, event) -> None:
        tid = event.tid
        if tid in self.order_by_tid:
            return  # replayed event; the order already exists
        payload = event.payload
        customer_id = payload["customer_id"]
        ctx = self.app.engine.context(tid, self.name)
        order_id = self.app.next_order_id()
        ctx.lock(self.orders, [order_id])
        seq = self._sequences.get(customer_id, 0) + 1
        self._sequences[customer_id] = seq
        items = [order_item_from_dict(d) for d in payload["confirmed_items"]]
        total_amount, total_freight, total_discount = compute_order_total(items)
        order = OrderRecord(
            order_id=order_id,
            invoice_number=next_invoice_number(customer_id, seq),
            customer_id=customer_id,
            items=items,
            total_amount=total_amount,
            total_freight=total_freight,
            total_discount=total_discount,
            status=OrderStatus.INVOICED,
            created_at=tid,
        )
        ctx.write(self.orders, order_id, order, "order-create")

        def index():
            self.order_by_tid[tid] = order_id
            for seller_id in order.seller_ids():
                self.seller_index.setdefault(seller_id, set()).add(order_id)

        ctx.on_commit(index)
        self.app.bus.publish(
            tid, EventType.InvoiceIssued,
            payload=dict(payload, order_id=order_id,
                         invoice_number=order.invoice_number,
                         total_amount=total_amount),
            source_service=self.name, target_service="payment",
            entity_key=f"t{tid}", causal_deps={event.event_id},
        )

    def _apply_status(self, event, target: OrderStatus) -> None:
        """Apply a status transition; out-of-order deliveries escalate the
        status anyway (the causality checker counts them), stale ones no-op."""
        order_id = event.payload["order_id"]
        ctx = self.app.engine.context(event.tid, self.name)
        ctx.lock(self.orders, [order_id])
        order = ctx.read(self.orders, order_id)
        if order is None:
            self.app.record_orphan_event(event)
            return
        if target in ORDER_TRANSITIONS[order.status]:
            order.transition_to(target)
            ctx.write(self.orders, order_id, order, f"order-status-{target.value}")
        elif _STATUS_RANK[target] > _STATUS_RANK[order.status]:
            order.status = target
            ctx.write(self.orders, order_id, order, f"order-status-{target.value}",
                      out_of_order=True)
        # stale (rank <= current): drop
        if target in (OrderStatus.DELIVERED, OrderStatus.PAYMENT_FAILED):
            def unindex():
                for seller_id in order.seller_ids():
                    ids = self.seller_index.get(seller_id)
                    if ids:
                        ids.discard(order_id)
            ctx.on_commit(unindex)

    def on_payment_processed(self, event) -> None:
        self._apply_status(event, OrderStatus.PAYMENT_PROCESSED)

    def on_payment_failed(self, event) -> None:
        self._apply_status(event, OrderStatus.PAYMENT_FAILED)

    def on_shipment_created(self, event) -> None:
        self._apply_status(event, OrderStatus.READY_FOR_SHIPMENT)
        self._apply_status(event, OrderStatus.IN_TRANSIT)

    def on_package_delivered(self, event) -> None:
        if event.payload.get("order_delivered"):
            self._apply_status(event, OrderStatus.DELIVERED)

    # -- queries ----------------------------------------------------------

    def seller_rows(self, seller_id: int) -> list[dict]:
        """Live read of the seller's in-progress order-item rows."""
        rows = []
        for order_id in sorted(self.seller_index.get(seller_id, ())):
            order = self.orders.get(order_id)
            if order is None or order.status not in IN_PROGRESS_STATUSES:
                continue
            for it in order.items:
                if it.seller_id != seller_id:
                    continue
                subtotal = it.unit_price * it.quantity
                rows.append({
                    "order_id": order_id,
                    "seller_id": seller_id,
                    "product_id": it.product_id,
                    "unit_price": it.unit_price,
                    "quantity": it.quantity,
                    "voucher": it.voucher,
                    "status": order.status.value,
                    "amount": subtotal - min(it.voucher, subtotal),
                })
        return rows


class PaymentService:
    name = "payment"

    def __init__(self, app: "Marketplace"):
        self.app = app
        self.payments = KeyedStore("payments")

    def on_invoice_issued(self, event) -> None:
        tid = event.tid
        payload = event.payload
        engine = self.app.engine
        ctx = engine.context(tid, self.name)
        ctx.lock(self.payments, [tid])
        if ctx.peek(self.payments, tid) is not None:
            return  # replayed invoice
        approved = bool(payload.get("payment_info", {}).get("approve", True))
        ctx.write(self.payments, tid, {
            "tid": tid,
            "order_id": payload["order_id"],
            "customer_id": payload["customer_id"],
            "amount": payload["total_amount"],
            "approved": approved,
            "method": payload.get("payment_info", {}).get("method", "card"),
        }, "payment")
        if engine.in_transaction(tid):
            # the transaction boundary ends at payment confirmation; stock
            # settlement and status fan-out ride post-commit events
            engine.commit(tid)
        etype = EventType.PaymentProcessed if approved else EventType.PaymentFailed
        out = {"customer_id": payload["customer_id"], "order_id": payload["order_id"]}
        publish = self.app.bus.publish
        publish(tid, etype, out, source_service=self.name,
                target_service="stock", entity_key=f"t{tid}",
                causal_deps={event.event_id})
        ev_order = publish(tid, etype, out, source_service=self.name,
                           target_service="order",
                           entity_key=payload["order_id"],
                           causal_deps={event.event_id})
        publish(tid, etype, out, source_service=self.name,
                target_service="customer", entity_key=payload["customer_id"],
                causal_deps={event.event_id})
        if approved:
            publish(tid, EventType.PaymentProcessed,
                    dict(payload, pp_order_event=ev_order.event_id),
                    source_service=self.name, target_service="shipment",
                    entity_key=f"t{tid}", causal_deps={event.event_id})
            self.app.outcome(tid, OUTCOME_COMMITTED)
        else:
            self.app.outcome(tid, OUTCOME_PAYMENT_FAILED, reason="payment_declined")


class ShipmentService:
    name = "shipment"

    def __init__(self, app: "Marketplace"):
        self.app = app
        self.shipments = KeyedStore("shipments")
        self.undelivered: dict[int, set[int]] = {}   # seller -> shipment ids
        self._created_event: dict[int, int] = {}     # shipment -> event id
        self._by_order: dict[int, list[int]] = {}

    def on_payment_processed(self, event) -> None:
        tid = event.tid
        payload = event.payload
        order_id = payload["order_id"]
        if order_id in self._by_order:
            return  # duplicate
        ctx = self.app.engine.context(tid, self.name)
        items = [order_item_from_dict(d) for d in payload["confirmed_items"]]
        order_view = OrderRecord(
            order_id=order_id,
            invoice_number=payload["invoice_number"],
            customer_id=payload["customer_id"],
            items=items,
            total_amount=payload["total_amount"],
            total_freight=0, total_discount=0,
            status=OrderStatus.READY_FOR_SHIPMENT,
            created_at=tid,
        )
        packages = assemble_packages(order_view)
        by_seller: dict[int, list[Package]] = {}
        for pkg in packages:
            by_seller.setdefault(pkg.seller_id, []).append(pkg)
        shipment_ids = []
        for seller_id in sorted(by_seller):
            shipment_id = self.app.next_shipment_id()
            pkgs = [
                Package(package_id=i + 1, seller_id=p.seller_id,
                        product_id=p.product_id, quantity=p.quantity)
                for i, p in enumerate(by_seller[seller_id])
            ]
            shipment = ShipmentRecord(
                shipment_id=shipment_id, order_id=order_id, seller_id=seller_id,
                packages=pkgs, status=ShipmentStatus.APPROVED, created_at=tid,
            )
            ctx.lock(self.shipments, [shipment_id])
            ctx.write(self.shipments, shipment_id, shipment, "shipment-create")
            shipment_ids.append((shipment_id, seller_id))
        ev = self.app.bus.publish(
            tid, EventType.ShipmentCreated,
            {"order_id": order_id, "customer_id": payload["customer_id"],
             "shipment_ids": [sid for sid, _ in shipment_ids]},
            source_service=self.name, target_service="order",
            entity_key=order_id,
            causal_deps={event.event_id, payload["pp_order_event"]},
        )

        def index():
            self._by_order[order_id] = [sid for sid, _ in shipment_ids]
            for shipment_id, seller_id in shipment_ids:
                self.undelivered.setdefault(seller_id, set()).add(shipment_id)
                self._created_event[shipment_id] = ev.event_id
        ctx.on_commit(index)

    def update_delivery(self, tid: int = 0, seller_limit: int = 10) -> list[dict]:
        """Deliver the oldest undelivered shipment of the first `seller_limit`
        sellers in chronological order. Returns the affected packages."""
        with self.app.world_lock:
            ctx = DirectContext(self.app.engine, tid, self.name)
            oldest: list[tuple[int, int, int]] = []   # (created_at, seller, shipment)
            for seller_id, ids in self.undelivered.items():
                if not ids:
                    continue
                best = min((self.shipments.get(s).created_at, s) for s in ids)
                oldest.append((best[0], seller_id, best[1]))
            oldest.sort()
            affected = []
            for created_at, seller_id, shipment_id in oldest[:seller_limit]:
                shipment = ctx.read(self.shipments, shipment_id)
                delivered_now = []
                for pkg in shipment.packages:
                    if not pkg.delivered:
                        pkg.delivered = True
                        pkg.delivered_at = tid
                        delivered_now.append(pkg)
                shipment.status = (ShipmentStatus.CONCLUDED if shipment.all_delivered()
                                   else ShipmentStatus.DELIVERY_IN_PROGRESS)
                ctx.write(self.shipments, shipment_id, shipment, "deliver-packages",
                          packages=[p.package_id for p in delivered_now])
                self.undelivered[seller_id].discard(shipment_id)
                order_id = shipment.order_id
                order_done = all(
                    self.shipments.get(s).all_delivered()
                    for s in self._by_order.get(order_id, [])
                )
                deps = {self._created_event[shipment_id]} if shipment_id in self._created_event else set()
                for i, pkg in enumerate(delivered_now):
                    last = i == len(delivered_now) - 1
                    payload = {
                        "order_id": order_id, "shipment_id": shipment_id,
                        "package_id": pkg.package_id, "seller_id": seller_id,
                        "customer_id": self._customer_of(order_id),
                        "order_delivered": order_done and last,
                    }
                    self.app.bus.publish(tid, EventType.PackageDelivered, payload,
                                         source_service=self.name,
                                         target_service="order",
                                         entity_key=order_id, causal_deps=deps)
                    self.app.bus.publish(tid, EventType.PackageDelivered, payload,
                                         source_service=self.name,
                                         target_service="customer",
                                         entity_key=payload["customer_id"],
                                         causal_deps=deps)
                    affected.append(payload)
            return affected

    def _customer_of(self, order_id: int) -> int:
        order = self.app.order.orders.get(order_id)
        return order.customer_id if order is not None else -1


class CustomerService:
    name = "customer"

    def __init__(self, app: "Marketplace"):
        self.app = app
        self.customers = KeyedStore("customers")
        self._seen: set[int] = set()

    def _bump(self, event, counter: str) -> None:
        if event.event_id in self._seen:
            return
        self._seen.add(event.event_id)
        customer_id = event.payload["customer_id"]
        ctx = self.app.engine.context(event.tid, self.name)
        ctx.lock(self.customers, [customer_id])
        row = ctx.read(self.customers, customer_id)
        if row is None:
            self.app.record_orphan_event(event)
            return
        setattr(row, counter, getattr(row, counter) + 1)
        ctx.write(self.customers, customer_id, row, f"stats-{counter}")

    def on_payment_processed(self, event) -> None:
        self._bump(event, "success_payments")

    def on_payment_failed(self, event) -> None:
        self._bump(event, "failed_payments")

    def on_package_delivered(self, event) -> None:
        self._bump(event, "delivered_packages")


class SellerService:
    name = "seller"

    def __init__(self, app: "Marketplace"):
        self.app = app
        self.sellers = KeyedStore("sellers")

    def dashboard(self, seller_id: int) -> dict:
        """Seller dashboard: aggregate in-progress amount plus the tuples
        behind it, evaluated per the engine's snapshot setting."""
        if self.sellers.get(seller_id) is None:
            raise NotFoundError(f"seller {seller_id} not found")
        order = self.app.order
        if self.app.engine.config.dashboard_snapshot:
            with self.app.world_lock:
                rows = order.seller_rows(seller_id)
            aggregate = sum(r["amount"] for r in rows)
        else:
            with self.app.world_lock:
                aggregate = sum(r["amount"] for r in order.seller_rows(seller_id))
            with self.app.world_lock:
                rows = order.seller_rows(seller_id)
        return {"seller_id": seller_id, "aggregate": aggregate, "tuples": rows}


class Marketplace:
    """Wires the services, bus, and consistency engine into one runtime."""

    def __init__(self, consistency: ConsistencyConfig | None = None,
                 delivery: DeliveryConfig | None = None,
                 audit: AuditLog | None = None,
                 compensation_enabled: bool = True):
        self.audit = audit or AuditLog()
        self.world_lock = threading.RLock()
        consistency = consistency or ConsistencyConfig()
        delivery = delivery or DeliveryConfig()
        if delivery.ordering is not consistency.event_ordering:
            delivery.ordering = consistency.event_ordering
        self.bus = EventBus(delivery, self.audit, self.world_lock)
        self.engine = ConsistencyEngine(consistency, self.audit, self.world_lock)
        self.compensation_enabled = compensation_enabled

        self.cart = CartService(self)
        self.product = ProductService(self)
        self.stock = StockService(self)
        self.order = OrderService(self)
        self.payment = PaymentService(self)
        self.shipment = ShipmentService(self)
        self.customer = CustomerService(self)
        self.seller = SellerService(self)

        self._order_ids = itertools.count(1)
        self._shipment_ids = itertools.count(1)
        self._checkouts: dict[int, int] = {}   # tid -> customer_id
        self.outcomes: dict[int, dict] = {}
        self.outcome_sink = None
        self.orphan_compensations = 0
        self.orphan_events = 0

        bus = self.bus
        bus.subscribe("stock", EventType.CartCheckedOut, self.stock.on_cart_checked_out)
        bus.subscribe("stock", EventType.ProductDeleted, self.stock.on_product_deleted)
        bus.subscribe("stock", EventType.PaymentProcessed, self.stock.on_payment_processed)
        bus.subscribe("stock", EventType.PaymentFailed, self.stock.on_payment_failed)
        bus.subscribe("cart", EventType.PriceUpdated, self.cart.on_price_updated)
        bus.subscribe("cart", EventType.ProductDeleted, self.cart.on_product_deleted)
        bus.subscribe("cart", EventType.StockReserveFailed, self.cart.on_stock_reserve_failed)
        bus.subscribe("order", EventType.StockReserved, self.order.on_stock_reserved)
        bus.subscribe("order", EventType.PaymentProcessed, self.order.on_payment_processed)
        bus.subscribe("order", EventType.PaymentFailed, self.order.on_payment_failed)
        bus.subscribe("order", EventType.ShipmentCreated, self.order.on_shipment_created)
        bus.subscribe("order", EventType.PackageDelivered, self.order.on_package_delivered)
        bus.subscribe("payment", EventType.InvoiceIssued, self.payment.on_invoice_issued)
        bus.subscribe("shipment", EventType.PaymentProcessed, self.shipment.on_payment_processed)
        bus.subscribe("customer", EventType.PaymentProcessed, self.customer.on_payment_processed)
        bus.subscribe("customer", EventType.PaymentFailed, self.customer.on_payment_failed)
        bus.subscribe("customer", EventType.PackageDelivered, self.customer.on_package_delivered)
        bus.crash_listener = self._on_consumer_crash

    # -- ids and bookkeeping ----------------------------------------------

    def next_order_id(self) -> int:
        return next(self._order_ids)

    def next_shipment_id(self) -> int:
        return next(self._shipment_ids)

    def register_checkout(self, tid: int, customer_id: int) -> None:
        self._checkouts[tid] = customer_id

    def customer_of_checkout(self, tid: int) -> int | None:
        return self._checkouts.get(tid)

    def outcome(self, tid: int, status: str, reason: str | None = None) -> None:
        record = {"tid": tid, "status": status, "reason": reason}
        self.outcomes[tid] = record
        if self.outcome_sink is not None:
            self.outcome_sink(tid, status, reason)

    def record_orphan_compensation(self, tid: int, op: str) -> None:
        self.orphan_compensations += 1
        self.audit.fault("stock", tid, None, fault="orphan_compensation", op=op)

    def record_orphan_event(self, event) -> None:
        self.orphan_events += 1
        self.audit.fault(event.target_service, event.tid, event.event_id,
                         fault="orphan_event",
                         event_type=event.event_type.value)

    def abort_checkout(self, tid: int, reason: str) -> None:
        """Terminate a checkout before payment: roll back any staging and
        report the abort."""
        self.engine.abort(tid, reason)
        self.stock.drop_reservation(tid)
        self.outcome(tid, OUTCOME_ABORTED, reason=reason)

    def _on_consumer_crash(self, event) -> None:
        tid = event.tid
        if self.engine.in_transaction(tid):
            self.abort_checkout(tid, reason="crash")
        # saga mode: the chain dies silently; recovery happens on timeout

    def recover_checkout(self, tid: int) -> None:
        """Compensate a checkout that produced no outcome (timed out)."""
        with self.world_lock:
            if self.engine.in_transaction(tid):
                self.abort_checkout(tid, reason="timeout")
                return
            if not self.compensation_enabled:
                return
            ctx = DirectContext(self.engine, tid, "recovery")
            res = self.stock.reservations.get(tid)
            if res is not None and res["state"] == "held":
                self.stock.apply_cancel(tid, ctx, compensation=True)
            order_id = self.order.order_by_tid.get(tid)
            if order_id is not None:
                order = ctx.read(self.order.orders, order_id)
                if order is not None and order.status is OrderStatus.INVOICED:
                    order.status = OrderStatus.PAYMENT_FAILED
                    ctx.write(self.order.orders, order_id, order,
                              "order-status-PAYMENT_FAILED", compensation=True)
                    for seller_id in order.seller_ids():
                        ids = self.order.seller_index.get(seller_id)
                        if ids:
                            ids.discard(order_id)

    # -- ingestion ----------------------------------------------------------

    def ingest(self, dataset) -> None:
        with self.world_lock:
            stores = [self.product.products, self.stock.stock,
                      self.customer.customers, self.seller.sellers,
                      self.cart.replica, self.cart.carts]
            if any(len(s) for s in stores):
                raise ConflictError("services are not empty; reset before ingest")
            ctx = DirectContext(self.engine, 0, "ingest")
            for product in dataset.products:
                if self.product.products.get(product.key) is not None:
                    raise ConflictError(f"duplicate product {product.key}")
                ctx.write(self.product.products, product.key, product, "ingest")
                ctx.write(self.cart.replica, product.key,
                          ReplicaEntry(price=product.price, version=product.version),
                          "ingest")
            for item in dataset.stock_items:
                if self.stock.stock.get(item.key) is not None:
                    raise ConflictError(f"duplicate stock item {item.key}")
                if self.product.products.get(item.key) is None:
                    raise ConflictError(f"stock item {item.key} references no product")
                ctx.write(self.stock.stock, item.key, item, "ingest")
            for customer in dataset.customers:
                if self.customer.customers.get(customer.customer_id) is not None:
                    raise ConflictError(f"duplicate customer {customer.customer_id}")
                ctx.write(self.customer.customers, customer.customer_id, customer, "ingest")
            for seller in dataset.sellers:
                if self.seller.sellers.get(seller.seller_id) is not None:
                    raise ConflictError(f"duplicate seller {seller.seller_id}")
                ctx.write(self.seller.sellers, seller.seller_id, seller, "ingest")

    def quiesce(self) -> int:
        return self.bus.drain()

    def reset(self) -> None:
        with self.world_lock:
            for store in (self.cart.carts, self.cart.replica, self.product.products,
                          self.stock.stock, self.order.orders, self.payment.payments,
                          self.shipment.shipments, self.customer.customers,
                          self.seller.sellers):
                store.clear()
            self.stock.reservations.clear()
            self.order.order_by_tid.clear()
            self.order.seller_index.clear()
            self.order._sequences.clear()
            self.shipment.undelivered.clear()
            self.shipment._created_event.clear()
            self.shipment._by_order.clear()
            self.customer._seen.clear()
            self.product._last_event.clear()
            self._checkouts.clear()
            self.outcomes.clear()
            self.orphan_compensations = 0
            self.orphan_events = 0
            self._order_ids = itertools.count(1)
            self._shipment_ids = itertools.count(1)
            self.bus.reset()
            self.engine.reset()
