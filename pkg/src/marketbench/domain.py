"""Marketplace domain types and pure computations.

Everything here is plain data: no I/O, no messaging, no shared mutable
state. Money is integer cents throughout, so totals are exact and safe
to compare across snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP
from enum import Enum


class MarketError(Exception):
    """Base class for domain and service errors."""


class InvalidInputError(MarketError):
    pass


class IllegalStateError(MarketError):
    pass


class NotFoundError(MarketError):
    pass


class ConflictError(MarketError):
    pass


def cents(value) -> int:
    """Parse a money amount ("12.50", 12.5, Decimal) into integer cents."""
    d = Decimal(str(value)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)
    return int(d * 100)


def money_str(amount_cents: int) -> str:
    sign = "-" if amount_cents < 0 else ""
    a = abs(amount_cents)
    return f"{sign}{a // 100}.{a % 100:02d}"


class CartStatus(str, Enum):
    OPEN = "OPEN"
    CHECKING_OUT = "CHECKING_OUT"
    CHECKED_OUT = "CHECKED_OUT"


class OrderStatus(str, Enum):
    INVOICED = "INVOICED"
    PAYMENT_PROCESSED = "PAYMENT_PROCESSED"
    PAYMENT_FAILED = "PAYMENT_FAILED"
    READY_FOR_SHIPMENT = "READY_FOR_SHIPMENT"
    IN_TRANSIT = "IN_TRANSIT"
    DELIVERED = "DELIVERED"


# Legal order-status transitions. Anything else is a broken path.
ORDER_TRANSITIONS: dict[OrderStatus, frozenset[OrderStatus]] = {
    OrderStatus.INVOICED: frozenset({OrderStatus.PAYMENT_PROCESSED, OrderStatus.PAYMENT_FAILED}),
    OrderStatus.PAYMENT_PROCESSED: frozenset({OrderStatus.READY_FOR_SHIPMENT}),
    OrderStatus.PAYMENT_FAILED: frozenset(),
    OrderStatus.READY_FOR_SHIPMENT: frozenset({OrderStatus.IN_TRANSIT}),
    OrderStatus.IN_TRANSIT: frozenset({OrderStatus.DELIVERED}),
    OrderStatus.DELIVERED: frozenset(),
}

# Orders still counted as "in progress" for the seller dashboard.
IN_PROGRESS_STATUSES = frozenset({
    OrderStatus.INVOICED,
    OrderStatus.PAYMENT_PROCESSED,
    OrderStatus.READY_FOR_SHIPMENT,
    OrderStatus.IN_TRANSIT,
})


class ShipmentStatus(str, Enum):
    APPROVED = "APPROVED"
    DELIVERY_IN_PROGRESS = "DELIVERY_IN_PROGRESS"
    CONCLUDED = "CONCLUDED"


@dataclass
class ProductRecord:
    seller_id: int
    product_id: int
    name: str
    price: int
    freight_value: int
    version: int = 1
    active: bool = True

    def __post_init__(self):
        if self.price < 0 or self.freight_value < 0:
            raise InvalidInputError("price and freight_value must be non-negative")
        if self.version < 1:
            raise InvalidInputError("version starts at 1")

    @property
    def key(self) -> tuple[int, int]:
        return (self.seller_id, self.product_id)

    def to_dict(self) -> dict:
        return {
            "seller_id": self.seller_id,
            "product_id": self.product_id,
            "name": self.name,
            "price": self.price,
            "freight_value": self.freight_value,
            "version": self.version,
            "active": self.active,
        }


@dataclass
class StockItem:
    seller_id: int
    product_id: int
    qty_available: int
    qty_reserved: int = 0
    version: int = 1
    active: bool = True

    def __post_init__(self):
        if self.qty_available < 0 or self.qty_reserved < 0:
            raise InvalidInputError("stock quantities must be non-negative")

    @property
    def key(self) -> tuple[int, int]:
        return (self.seller_id, self.product_id)

    def to_dict(self) -> dict:
        return {
            "seller_id": self.seller_id,
            "product_id": self.product_id,
            "qty_available": self.qty_available,
            "qty_reserved": self.qty_reserved,
            "version": self.version,
            "active": self.active,
        }


@dataclass
class CartItem:
    seller_id: int
    product_id: int
    unit_price: int
    freight_value: int
    quantity: int
    applied_price_version: int = 1
    voucher: int = 0

    def __post_init__(self):
        if self.quantity < 1:
            raise InvalidInputError("quantity must be >= 1")
        if self.unit_price < 0:
            raise InvalidInputError("unit_price must be >= 0")
        if self.applied_price_version < 1:
            raise InvalidInputError("applied_price_version must be >= 1")

    def to_dict(self) -> dict:
        return {
            "seller_id": self.seller_id,
            "product_id": self.product_id,
            "unit_price": self.unit_price,
            "freight_value": self.freight_value,
            "quantity": self.quantity,
            "applied_price_version": self.applied_price_version,
            "voucher": self.voucher,
        }


# An order item is a cart item whose quantity has been confirmed against
# stock; with all-or-nothing reservation the confirmed quantity equals
# the requested one, so the shape is identical.
OrderItem = CartItem


def order_item_from_dict(d: dict) -> CartItem:
    return CartItem(
        seller_id=d["seller_id"],
        product_id=d["product_id"],
        unit_price=d["unit_price"],
        freight_value=d["freight_value"],
        quantity=d["quantity"],
        applied_price_version=d["applied_price_version"],
        voucher=d.get("voucher", 0),
    )


@dataclass
class Cart:
    customer_id: int
    items: list[CartItem] = field(default_factory=list)
    status: CartStatus = CartStatus.OPEN

    def upsert_item(self, item: CartItem) -> None:
        """Add or replace the line for (seller_id, product_id)."""
        if self.status is not CartStatus.OPEN:
            raise ConflictError(f"cart {self.customer_id} is {self.status.value}")
        for i, existing in enumerate(self.items):
            if (existing.seller_id, existing.product_id) == (item.seller_id, item.product_id):
                self.items[i] = item
                return
        self.items.append(item)

    def to_dict(self) -> dict:
        return {
            "customer_id": self.customer_id,
            "items": [it.to_dict() for it in self.items],
            "status": self.status.value,
        }


@dataclass
class OrderRecord:
    order_id: int
    invoice_number: str
    customer_id: int
    items: list[OrderItem]
    total_amount: int
    total_freight: int
    total_discount: int
    status: OrderStatus
    created_at: int

    def transition_to(self, new_status: OrderStatus) -> None:
        if new_status not in ORDER_TRANSITIONS[self.status]:
            raise IllegalStateError(
                f"order {self.order_id}: illegal transition {self.status.value} -> {new_status.value}"
            )
        self.status = new_status

    def seller_ids(self) -> list[int]:
        return sorted({it.seller_id for it in self.items})

    def to_dict(self) -> dict:
        return {
            "order_id": self.order_id,
            "invoice_number": self.invoice_number,
            "customer_id": self.customer_id,
            "items": [it.to_dict() for it in self.items],
            "total_amount": self.total_amount,
            "total_freight": self.total_freight,
            "total_discount": self.total_discount,
            "status": self.status.value,
            "created_at": self.created_at,
        }


@dataclass
class Package:
    package_id: int
    seller_id: int
    product_id: int
    quantity: int
    delivered: bool = False
    delivered_at: int | None = None

    def to_dict(self) -> dict:
        return {
            "package_id": self.package_id,
            "seller_id": self.seller_id,
            "product_id": self.product_id,
            "quantity": self.quantity,
            "delivered": self.delivered,
            "delivered_at": self.delivered_at,
        }


@dataclass
class ShipmentRecord:
    shipment_id: int
    order_id: int
    seller_id: int
    packages: list[Package]
    status: ShipmentStatus
    created_at: int

    def all_delivered(self) -> bool:
        return all(p.delivered for p in self.packages)

    def to_dict(self) -> dict:
        return {
            "shipment_id": self.shipment_id,
            "order_id": self.order_id,
            "seller_id": self.seller_id,
            "packages": [p.to_dict() for p in self.packages],
            "status": self.status.value,
            "created_at": self.created_at,
        }


@dataclass
class CustomerRecord:
    customer_id: int
    name: str = ""
    address: str = ""
    success_payments: int = 0
    failed_payments: int = 0
    delivered_packages: int = 0
    abandoned_carts: int = 0

    def to_dict(self) -> dict:
        return {
            "customer_id": self.customer_id,
            "name": self.name,
            "address": self.address,
            "success_payments": self.success_payments,
            "failed_payments": self.failed_payments,
            "delivered_packages": self.delivered_packages,
            "abandoned_carts": self.abandoned_carts,
        }


@dataclass
class SellerRecord:
    seller_id: int
    name: str = ""

    def to_dict(self) -> dict:
        return {"seller_id": self.seller_id, "name": self.name}


def compute_order_total(items: list[OrderItem]) -> tuple[int, int, int]:
    """Return (total_amount, total_freight, total_discount) in cents.

    Per-item vouchers are capped at the item subtotal, so the amount
    never goes negative.
    """
    if not items:
        raise InvalidInputError("order has no items")
    total_amount = 0
    total_freight = 0
    total_discount = 0
    for it in items:
        if it.quantity < 1:
            raise InvalidInputError("item quantity must be >= 1")
        subtotal = it.unit_price * it.quantity
        discount = min(it.voucher, subtotal)
        total_amount += subtotal - discount
        total_discount += discount
        total_freight += it.freight_value * it.quantity
    return total_amount, total_freight, total_discount


def next_invoice_number(customer_id: int, order_sequence: int) -> str:
    return f"{customer_id}-{order_sequence}"


def assemble_packages(order: OrderRecord) -> list[Package]:
    """One package per order item, numbered 1..n in item order."""
    if order.status is not OrderStatus.READY_FOR_SHIPMENT:
        raise IllegalStateError(
            f"order {order.order_id} is {order.status.value}, not READY_FOR_SHIPMENT"
        )
    return [
        Package(
            package_id=i + 1,
            seller_id=it.seller_id,
            product_id=it.product_id,
            quantity=it.quantity,
        )
        for i, it in enumerate(order.items)
    ]
