"""Domain types and certificate arithmetic shared by every other module.

An accuracy certificate says that a Delta-parameterized model family
approximates a reference function with error ``kappa * Delta**N`` at one
derivative level (function, gradient or Hessian), either at the base point
only (AT) or uniformly over the ball of radius Delta around it (NEAR).
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import qmc


class ModelCalcError(Exception):
    """Base class for all library errors."""


class OrderViolationError(ModelCalcError, ValueError):
    pass


class CertificateMismatchError(ModelCalcError, TypeError):
    pass


class SmoothnessError(ModelCalcError, ValueError):
    pass


class EstimationError(ModelCalcError, ArithmeticError):
    pass


class CompositionError(ModelCalcError, ValueError):
    pass


class PreconditionError(ModelCalcError, ValueError):
    """A hypothesis of the bound being computed does not hold."""


class IncompleteInputsError(ModelCalcError, KeyError):
    """A symbol required by a bound formula was not supplied."""

    def __init__(self, symbol: str):
        super().__init__(symbol)
        self.symbol = symbol

    def __str__(self):
        return f"missing required input {self.symbol}"


class DimensionMismatchError(ModelCalcError, TypeError):
    pass


class DivisionDomainError(ModelCalcError, ZeroDivisionError):
    pass


class EvaluationError(ModelCalcError, ArithmeticError):
    """An oracle could not be evaluated (e.g. a quotient pole)."""

    def __init__(self, message: str, point=None):
        super().__init__(message)
        self.point = None if point is None else np.asarray(point, dtype=float).copy()


class DerivativeLevel(enum.Enum):
    FUNCTION = "function"
    GRADIENT = "gradient"
    HESSIAN = "hessian"


class Locality(enum.Enum):
    AT = "at"
    NEAR = "near"


class Quantity(enum.Enum):
    ABS_F = "abs_f"
    NORM_GRAD = "norm_grad"
    NORM_HESS = "norm_hess"
    NORM_THIRD = "norm_third"
    ABS_RECIP = "abs_recip"
    IMAGE_GRAD = "image_grad"


class Side(enum.Enum):
    TRUTH = "truth"
    MODEL = "model"


class Provenance(enum.Enum):
    ANALYTIC = "analytic"
    SAMPLED = "sampled"
    DERIVED_FROM_CERTIFICATE = "derived_from_certificate"


LEVEL_QUANTITY = {
    DerivativeLevel.FUNCTION: Quantity.ABS_F,
    DerivativeLevel.GRADIENT: Quantity.NORM_GRAD,
    DerivativeLevel.HESSIAN: Quantity.NORM_HESS,
}


@functools.total_ordering
class Order:
    """Non-negative accuracy order; ``Order.INFINITY`` is an explicit state."""

    __slots__ = ("_value",)

    def __init__(self, value: float | None):
        if value is not None:
            value = float(value)
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"finite order must be >= 0, got {value}")
        self._value = value

    @classmethod
    def of(cls, x) -> "Order":
        if isinstance(x, Order):
            return x
        if isinstance(x, str):
            if x.strip().lower() in ("inf", "infinity", "∞"):
                return INFINITY
            return cls(float(x))
        if isinstance(x, float) and math.isinf(x) and x > 0:
            return INFINITY
        return cls(x)

    @property
    def is_infinite(self) -> bool:
        return self._value is None

    @property
    def value(self) -> float:
        if self._value is None:
            raise OrderViolationError("infinite order has no finite value")
        return self._value

    def __float__(self):
        return math.inf if self._value is None else self._value

    def __eq__(self, other):
        if not isinstance(other, Order):
            try:
                other = Order.of(other)
            except (TypeError, ValueError):
                return NotImplemented
        return self._value == other._value

    def __lt__(self, other):
        other = Order.of(other)
        if self._value is None:
            return False
        if other._value is None:
            return True
        return self._value < other._value

    def __hash__(self):
        return hash(("Order", self._value))

    def __repr__(self):
        return "Order(INFINITY)" if self._value is None else f"Order({self._value!r})"

    def __str__(self):
        if self._value is None:
            return "inf"
        v = self._value
        return str(int(v)) if v.is_integer() else repr(v)


INFINITY = Order.__new__(Order)
INFINITY._value = None
Order.INFINITY = INFINITY


def scaled_kappa(kappa: float, delta_bar: float, order: Order, target: Order) -> float:
    """``kappa * delta_bar**(order - target)``; an exact term (kappa 0) stays 0."""
    if kappa == 0.0:
        return 0.0
    if order.is_infinite:
        raise OrderViolationError("infinite order carries kappa > 0")
    if target.is_infinite:
        raise OrderViolationError("cannot weaken a finite order to infinity")
    return kappa * delta_bar ** (order.value - target.value)


def as_point(x) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if arr.ndim != 1 or arr.size < 1:
        raise ValueError(f"point must be a non-empty vector, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("point coordinates must be finite")
    return arr


def as_center(x) -> np.ndarray:
    """Like :func:`as_point` but keeps an extended-precision center unrounded."""
    arr = np.atleast_1d(np.asarray(x))
    if arr.dtype == np.longdouble:
        as_point(arr)
        return arr
    return as_point(arr)


def extended(x) -> np.ndarray:
    return np.asarray(x, dtype=np.longdouble)


def point_key(x) -> tuple[float, ...]:
    return tuple(float(v) for v in as_point(x))


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", point_key(self.center))
        r = float(self.radius)
        if not (math.isfinite(r) and r > 0):
            raise ValueError(f"ball radius must be positive and finite, got {self.radius}")
        object.__setattr__(self, "radius", r)

    @property
    def dim(self) -> int:
        return len(self.center)

    def sample(self, n_interior: int = 64, seed: int = 0) -> np.ndarray:
        """Center, the 2d axis points on the sphere, then ``n_interior`` Sobol points."""
        unit = unit_ball_sample(self.dim, n_interior, seed)
        return np.asarray(self.center) + self.radius * unit


@functools.lru_cache(maxsize=64)
def _sobol_ball(dim: int, n: int, seed: int) -> np.ndarray:
    # Prefix-stable: the first k points of an n-point draw equal a k-point draw.
    raw = qmc.Sobol(dim + 1, scramble=True, seed=seed).random(n) if n else np.zeros((0, dim + 1))
    raw = np.clip(raw, 1e-12, 1 - 1e-12)
    from scipy.special import ndtri

    direction = ndtri(raw[:, :dim])
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = raw[:, dim] ** (1.0 / dim)
    return direction * radius[:, None]


def unit_ball_sample(dim: int, n_interior: int = 64, seed: int = 0) -> np.ndarray:
    eye = np.eye(dim)
    pts = np.vstack([np.zeros((1, dim)), eye, -eye])
    if n_interior:
        import warnings

        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # Sobol balance warning for non powers of 2
            pts = np.vstack([pts, _sobol_ball(dim, n_interior, seed)])
    pts.setflags(write=False)
    return pts


@dataclass(frozen=True)
class AccuracyCertificate:
    """Order-N accuracy claim ``err <= kappa * Delta**N`` for ``Delta <= delta_bar``."""

    level: DerivativeLevel
    order: Order
    kappa: float
    locality: Locality
    base: tuple[float, ...]
    delta_bar: float
    trace: tuple[str, ...] = field(default=(), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "order", Order.of(self.order))
        object.__setattr__(self, "base", point_key(self.base))
        kappa = float(self.kappa)
        if not (math.isfinite(kappa) and kappa >= 0):
            raise ValueError(f"kappa must be finite and >= 0, got {self.kappa}")
        if self.order.is_infinite and kappa != 0.0:
            raise OrderViolationError("order INFINITY requires kappa = 0")
        db = float(self.delta_bar)
        if not (math.isfinite(db) and db > 0):
            raise ValueError(f"delta_bar must be positive, got {self.delta_bar}")
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "delta_bar", db)
        object.__setattr__(self, "trace", tuple(self.trace))

    @property
    def is_exact(self) -> bool:
        return self.order.is_infinite

    def bound(self, delta: float) -> float:
        if self.kappa == 0.0:
            return 0.0
        return self.kappa * delta ** self.order.value


@dataclass(frozen=True)
class UniformBound:
    quantity: Quantity
    value: float
    locality: Locality
    base: tuple[float, ...]
    delta_bar: float
    provenance: Provenance = Provenance.ANALYTIC
    side: Side = Side.TRUTH

    def __post_init__(self):
        object.__setattr__(self, "base", point_key(self.base))
        v = float(self.value)
        if not (math.isfinite(v) and v >= 0):
            raise ValueError(f"uniform bound must be finite and >= 0, got {self.value}")
        object.__setattr__(self, "value", v)
        object.__setattr__(self, "delta_bar", float(self.delta_bar))

    @property
    def symbol(self) -> str:
        return bound_symbol(self.quantity, self.side)


def bound_symbol(quantity: Quantity, side: Side) -> str:
    names = {
        Quantity.ABS_F: "f",
        Quantity.NORM_GRAD: "grad_f",
        Quantity.NORM_HESS: "hess_f",
        Quantity.NORM_THIRD: "third_f",
        Quantity.ABS_RECIP: "recip_f",
        Quantity.IMAGE_GRAD: "bar_grad_f",
    }
    prefix = "M_model_" if side is Side.MODEL else "M_"
    return prefix + names[quantity]


@dataclass(frozen=True)
class TraceTerm:
    tag: str
    description: str
    value: float


@dataclass(frozen=True)
class CombinedBound:
    level: DerivativeLevel
    locality: Locality
    order: Order
    constant: float
    trace: tuple[TraceTerm, ...]
    delta_bar: float
    base: tuple[float, ...] = ()
    flags: frozenset = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "order", Order.of(self.order))
        c = float(self.constant)
        if not (math.isfinite(c) and c >= 0):
            raise ValueError(f"combined constant must be finite and >= 0, got {self.constant}")
        object.__setattr__(self, "constant", c)
        if not self.trace:
            raise ValueError("combined bound trace must be non-empty")
        object.__setattr__(self, "trace", tuple(self.trace))
        object.__setattr__(self, "flags", frozenset(self.flags))

    @property
    def tag(self) -> str:
        return self.trace[0].tag

    def bound(self, delta: float) -> float:
        if self.constant == 0.0:
            return 0.0
        return self.constant * delta ** self.order.value

    def as_certificate(self) -> AccuracyCertificate:
        return AccuracyCertificate(
            level=self.level,
            order=self.order,
            kappa=self.constant,
            locality=self.locality,
            base=self.base,
            delta_bar=self.delta_bar,
            trace=tuple(f"{t.tag}: {t.description} = {t.value!r}" for t in self.trace),
        )


def weaken_order(cert: AccuracyCertificate, target) -> AccuracyCertificate:
    """Restate ``cert`` at a lower order, absorbing the gap into kappa."""
    target = Order.of(target)
    if target > cert.order:
        raise OrderViolationError(f"target order {target} exceeds certificate order {cert.order}")
    if target == cert.order:
        return cert
    kappa = scaled_kappa(cert.kappa, cert.delta_bar, cert.order, target) if not cert.order.is_infinite else 0.0
    return AccuracyCertificate(
        level=cert.level,
        order=target,
        kappa=kappa,
        locality=cert.locality,
        base=cert.base,
        delta_bar=cert.delta_bar,
        trace=cert.trace + (f"weakened {cert.order} -> {target}",),
    )


def bound_from_certificate(cert: AccuracyCertificate, truth_bound: UniformBound) -> UniformBound:
    """Uniform bound on the model family: ``delta_bar**N * kappa + M_truth``."""
    if LEVEL_QUANTITY[cert.level] is not truth_bound.quantity:
        raise CertificateMismatchError(
            f"{cert.level.value} certificate cannot bound {truth_bound.quantity.value}"
        )
    if truth_bound.side is not Side.TRUTH:
        raise CertificateMismatchError("truth_bound must describe the reference function")
    if cert.base != truth_bound.base:
        raise CertificateMismatchError("certificate and bound have different base points")
    if cert.locality is not truth_bound.locality:
        raise CertificateMismatchError("certificate and bound have different localities")
    if cert.delta_bar != truth_bound.delta_bar:
        raise CertificateMismatchError("certificate and bound have different radius caps")
    extra = 0.0 if cert.kappa == 0.0 else cert.delta_bar ** cert.order.value * cert.kappa
    return UniformBound(
        quantity=truth_bound.quantity,
        value=extra + truth_bound.value,
        locality=truth_bound.locality,
        base=truth_bound.base,
        delta_bar=truth_bound.delta_bar,
        provenance=Provenance.DERIVED_FROM_CERTIFICATE,
        side=Side.MODEL,
    )


def min_order(orders: Iterable) -> Order:
    orders = [Order.of(o) for o in orders]
    if not orders:
        raise ValueError("min_order needs at least one order")
    return min(orders)


def matrix_norm(H) -> float:
    """Frobenius norm of a matrix (``||u v^T|| = ||u|| ||v||``)."""
    H = np.asarray(H, dtype=float)
    if H.ndim != 2:
        raise ValueError(f"matrix_norm expects a 2-D matrix, got shape {H.shape}")
    if not np.all(np.isfinite(H)):
        raise ValueError("matrix_norm expects finite entries")
    return float(np.sqrt(np.sum(H * H)))


def level_norm(arr) -> float:
    """Euclidean norm of a value, Frobenius norm of a Jacobian or stacked Hessians."""
    arr = np.asarray(arr, dtype=float)
    return float(np.sqrt(np.sum(arr * arr)))


def combine_terms(terms: Sequence[TraceTerm]) -> float:
    return float(math.fsum(t.value for t in terms))
