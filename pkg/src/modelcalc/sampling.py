"""Random, internally consistent calculus inputs for invariant checks."""
from __future__ import annotations

import numpy as np

from .calculus import BoundInputs, PartInputs
from .core import AccuracyCertificate, DerivativeLevel, INFINITY, Locality, Order, Quantity, UniformBound

_ORDERS = (Order.of(1), Order.of(2), Order.of(3), INFINITY)


def random_part(
    rng: np.random.Generator,
    base=(0.0,),
    delta_bar: float = 0.125,
    function_at_exact: bool = False,
    positive_order: bool = False,
    label: str = "",
) -> PartInputs:
    """Certificates at every level/locality plus truth bounds with ``NEAR >= AT``."""
    certs = []
    for level in DerivativeLevel:
        for loc in Locality:
            if function_at_exact and level is DerivativeLevel.FUNCTION and loc is Locality.AT:
                order = INFINITY
            else:
                order = _ORDERS[rng.integers(len(_ORDERS))]
                if not positive_order and rng.random() < 0.1:
                    order = Order.of(0)
            kappa = 0.0 if order.is_infinite else float(rng.uniform(0.1, 2.0))
            certs.append(AccuracyCertificate(level, order, kappa, loc, base, delta_bar))
    bounds = []
    f_at = float(rng.uniform(0.5, 2.0))
    for q in (Quantity.ABS_F, Quantity.NORM_GRAD, Quantity.NORM_HESS):
        at = f_at if q is Quantity.ABS_F else float(rng.uniform(0.0, 2.0))
        near = at + float(rng.uniform(0.0, 1.0))
        bounds.append(UniformBound(q, at, Locality.AT, base, delta_bar))
        bounds.append(UniformBound(q, near, Locality.NEAR, base, delta_bar))
    f_near = next(b.value for b in bounds if b.quantity is Quantity.ABS_F and b.locality is Locality.NEAR)
    f_min = float(rng.uniform(0.1, 1.0)) * min(f_at, f_near)
    bounds.append(UniformBound(Quantity.ABS_RECIP, 1.0 / f_at, Locality.AT, base, delta_bar))
    bounds.append(UniformBound(Quantity.ABS_RECIP, 1.0 / f_min, Locality.NEAR, base, delta_bar))
    return PartInputs(tuple(certs), tuple(bounds), value=(f_at,), label=label)


def random_inputs(rng: np.random.Generator, n: int, base=(0.0,), delta_bar: float = 0.125, **kw) -> BoundInputs:
    parts = tuple(random_part(rng, base, delta_bar, label=f"f{i + 1}", **kw) for i in range(n))
    return BoundInputs(parts, delta_bar)


def replicate(part: PartInputs, n: int) -> BoundInputs:
    db = min(item.delta_bar for item in part.certificates + part.bounds)
    return BoundInputs(tuple(part for _ in range(n)), db)
