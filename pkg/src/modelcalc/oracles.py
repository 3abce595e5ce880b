"""Analytic test oracles, model-class builders and derivative-propagating combinators.

Every oracle is evaluated in batches: values have shape ``(n, m)``, Jacobians
``(n, m, d)`` and Hessians ``(n, m, d, d)``.  The convenience accessors
``value``/``grad``/``hess`` accept a single point or a batch and drop the
``m`` axis for scalar functions.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import (
    INFINITY,
    AccuracyCertificate,
    Ball,
    CompositionError,
    DerivativeLevel,
    DimensionMismatchError,
    EstimationError,
    EvaluationError,
    Locality,
    Order,
    Quantity,
    SmoothnessError,
    as_center,
    extended,
    point_key,
    scaled_kappa,
)

BatchFn = Callable[[np.ndarray], np.ndarray]


def _floating(a) -> np.ndarray:
    """Keep float64 or extended precision; promote everything else to float64."""
    a = np.asarray(a)
    if a.dtype == np.longdouble or a.dtype == np.float64:
        return a
    return a.astype(float)


@dataclass(frozen=True, eq=False)
class SmoothOracle:
    """Function or mapping ``R^d -> R^m`` with analytic derivatives.

    Parameters
    ----------
    name : str
        Human-readable label, used in reports.
    dim_in, dim_out : int
        Input dimension ``d`` and output dimension ``m``.
    smoothness : int
        Continuity class 0..3; gradients need 1, Hessians need 2.
    value_fn, jac_fn, hess_fn : callable
        Batched kernels returning ``(n, m)``, ``(n, m, d)`` and ``(n, m, d, d)``.
    """

    name: str
    dim_in: int
    dim_out: int
    smoothness: int
    value_fn: BatchFn
    jac_fn: BatchFn | None = None
    hess_fn: BatchFn | None = None

    def __post_init__(self):
        if self.dim_in < 1 or self.dim_out < 1:
            raise ValueError("oracle dimensions must be >= 1")
        if not 0 <= self.smoothness <= 3:
            raise ValueError("smoothness must be in 0..3")
        if self.smoothness >= 1 and self.jac_fn is None:
            raise ValueError(f"{self.name}: C{self.smoothness} oracle needs a gradient")
        if self.smoothness >= 2 and self.hess_fn is None:
            raise ValueError(f"{self.name}: C{self.smoothness} oracle needs a Hessian")

    @property
    def is_scalar(self) -> bool:
        return self.dim_out == 1

    def _points(self, x) -> tuple[np.ndarray, bool]:
        X = _floating(x)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.ndim != 2 or X.shape[1] != self.dim_in:
            raise DimensionMismatchError(
                f"{self.name}: expected points of dimension {self.dim_in}, got shape {np.shape(x)}"
            )
        return X, single

    def _checked(self, out: np.ndarray, X: np.ndarray, what: str) -> np.ndarray:
        if not np.all(np.isfinite(out)):
            bad = np.flatnonzero(~np.all(np.isfinite(out.reshape(out.shape[0], -1)), axis=1))
            raise EvaluationError(f"{self.name}: non-finite {what}", point=X[bad[0]])
        return out

    def eval_batch(self, X: np.ndarray) -> np.ndarray:
        X, _ = self._points(X)
        return self._checked(_floating(self.value_fn(X)), X, "value")

    def jac_batch(self, X: np.ndarray) -> np.ndarray:
        if self.smoothness < 1:
            raise SmoothnessError(f"{self.name} is C0; no gradient available")
        X, _ = self._points(X)
        return self._checked(_floating(self.jac_fn(X)), X, "gradient")

    def hess_batch(self, X: np.ndarray) -> np.ndarray:
        if self.smoothness < 2:
            raise SmoothnessError(f"{self.name} is C{self.smoothness}; no Hessian available")
        X, _ = self._points(X)
        return self._checked(_floating(self.hess_fn(X)), X, "Hessian")

    def _squeeze(self, arr: np.ndarray, single: bool):
        if self.is_scalar:
            arr = arr[:, 0]
        if single:
            arr = arr[0]
            if arr.ndim == 0:
                return float(arr) if arr.dtype == np.float64 else arr[()]
        return arr

    def value(self, x):
        X, single = self._points(x)
        return self._squeeze(self.eval_batch(X), single)

    def grad(self, x):
        X, single = self._points(x)
        return self._squeeze(self.jac_batch(X), single)

    def hess(self, x):
        X, single = self._points(x)
        return self._squeeze(self.hess_batch(X), single)

    def level_batch(self, level: DerivativeLevel, X: np.ndarray) -> np.ndarray:
        if level is DerivativeLevel.FUNCTION:
            return self.eval_batch(X)
        if level is DerivativeLevel.GRADIENT:
            return self.jac_batch(X)
        return self.hess_batch(X)


def level_norms(arr: np.ndarray) -> np.ndarray:
    """Row-wise Euclidean/Frobenius norm of a batched level array."""
    flat = arr.reshape(arr.shape[0], -1)
    return np.sqrt(np.sum(flat * flat, axis=1))


def third_derivative_norms(oracle: SmoothOracle, X: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Frobenius norm of the third-derivative tensor by central differences of Hessians."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    n, d = X.shape
    total = np.zeros(n)
    h = step * (1.0 + np.linalg.norm(X, axis=1))
    for k in range(d):
        E = np.zeros_like(X)
        E[:, k] = h
        diff = (oracle.hess_batch(X + E) - oracle.hess_batch(X - E)) / (2.0 * h[:, None, None, None])
        total += np.sum(diff.reshape(n, -1) ** 2, axis=1)
    return np.sqrt(total)


def oracle_sup(oracle: SmoothOracle, quantity: Quantity, X: np.ndarray) -> float:
    """Maximum of ``quantity`` over the rows of ``X``."""
    if quantity is Quantity.ABS_F:
        vals = level_norms(oracle.eval_batch(X))
    elif quantity is Quantity.NORM_GRAD:
        vals = level_norms(oracle.jac_batch(X))
    elif quantity is Quantity.NORM_HESS:
        vals = level_norms(oracle.hess_batch(X))
    elif quantity is Quantity.NORM_THIRD:
        vals = third_derivative_norms(oracle, X)
    elif quantity is Quantity.ABS_RECIP:
        v = oracle.eval_batch(X)
        if not oracle.is_scalar:
            raise DimensionMismatchError("ABS_RECIP needs a scalar oracle")
        if np.any(v == 0.0):
            raise EstimationError(f"{oracle.name}: reciprocal unbounded on sample (zero value)")
        vals = np.abs(1.0 / v[:, 0])
    elif quantity is Quantity.IMAGE_GRAD:
        J = oracle.jac_batch(X)
        comp = np.sqrt(np.sum(J * J, axis=2)).max(axis=0)
        vals = np.array([math.sqrt(float(np.sum(comp * comp)))])
    else:  # pragma: no cover - enum is closed
        raise ValueError(quantity)
    if not np.all(np.isfinite(vals)):
        raise EstimationError(f"{oracle.name}: non-finite {quantity.value} on sample")
    return float(np.max(vals))


# ---------------------------------------------------------------------------
# Catalogue
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Ridge:
    """Term ``phi(w^T x)`` with ``phi`` and its first two derivatives."""

    w: np.ndarray
    phi: Callable
    dphi: Callable
    d2phi: Callable


def scalar_oracle(
    name: str,
    dim: int,
    *,
    const: float = 0.0,
    linear: np.ndarray | None = None,
    quad: np.ndarray | None = None,
    ridges: Sequence[Ridge] = (),
) -> SmoothOracle:
    """``const + b^T x + x^T A x + sum_k phi_k(w_k^T x)`` with ``A`` symmetric."""
    b = np.zeros(dim) if linear is None else np.asarray(linear, dtype=float)
    A = np.zeros((dim, dim)) if quad is None else np.asarray(quad, dtype=float)
    if b.shape != (dim,) or A.shape != (dim, dim) or not np.allclose(A, A.T, rtol=0, atol=0):
        raise ValueError("linear/quadratic coefficients have wrong shape or A is not symmetric")
    ridges = tuple(ridges)

    def value(X):
        v = const + X @ b + np.einsum("ni,ij,nj->n", X, A, X)
        for r in ridges:
            v = v + r.phi(X @ r.w)
        return v[:, None]

    def jac(X):
        g = b[None, :] + 2.0 * X @ A
        for r in ridges:
            g = g + r.dphi(X @ r.w)[:, None] * r.w[None, :]
        return g[:, None, :]

    def hess(X):
        H = np.broadcast_to(2.0 * A, (X.shape[0], dim, dim)).copy()
        for r in ridges:
            H += r.d2phi(X @ r.w)[:, None, None] * np.outer(r.w, r.w)[None]
        return H[:, None]

    return SmoothOracle(name, dim, 1, 3, value, jac, hess)


def _spread(dim: int, lo: float, hi: float) -> np.ndarray:
    return np.linspace(lo, hi, dim) if dim > 1 else np.array([lo])


def _unit(dim: int, k: int) -> np.ndarray:
    e = np.zeros(dim)
    e[k] = 1.0
    return e


def _affine(dim):
    # Dyadic coefficients keep interpolation of this oracle exact in floating point.
    return scalar_oracle("affine", dim, const=0.75, linear=0.5 + 0.25 * np.arange(dim))


def _quadratic(dim):
    A = np.full((dim, dim), 0.3)
    np.fill_diagonal(A, 1.0 + 0.5 * np.arange(dim))
    return scalar_oracle("quadratic", dim, quad=A)


def _sphere(dim):
    return scalar_oracle("sphere", dim, quad=np.eye(dim))


def _exp(dim):
    return scalar_oracle("exp", dim, ridges=[Ridge(_spread(dim, 0.6, -0.4), np.exp, np.exp, np.exp)])


def _trig(dim):
    u = _spread(dim, 1.0, 0.5)
    v = _spread(dim, -0.7, 0.9)
    return scalar_oracle(
        "trig",
        dim,
        ridges=[
            Ridge(u, np.sin, np.cos, lambda t: -np.sin(t)),
            Ridge(v, lambda t: 0.5 * np.cos(t), lambda t: -0.5 * np.sin(t), lambda t: -0.5 * np.cos(t)),
        ],
    )


def _positive(dim):
    # Value >= 1.5 - 0.5 = 1 everywhere, so 1/f is bounded by 1.
    u = _spread(dim, 0.8, -0.6)
    return scalar_oracle(
        "positive",
        dim,
        const=1.5,
        quad=0.25 * np.eye(dim),
        ridges=[Ridge(u, lambda t: 0.5 * np.sin(t), lambda t: 0.5 * np.cos(t), lambda t: -0.5 * np.sin(t))],
    )


def _root(dim):
    # sin(x_1) * (1 + 0.5 x_2^2); exactly zero on the hyperplane x_1 = 0.
    first = scalar_oracle("sin_x1", dim, ridges=[Ridge(_unit(dim, 0), np.sin, np.cos, lambda t: -np.sin(t))])
    if dim == 1:
        return replace(first, name="root")
    second = scalar_oracle("bump_x2", dim, const=1.0, quad=0.5 * np.outer(_unit(dim, 1), _unit(dim, 1)))
    return replace(combine_oracles(Combination.PRODUCT, [first, second]), name="root")


def _root2(dim):
    # x_1 * exp(0.5 x_d); exactly zero on x_1 = 0.
    first = scalar_oracle("x1", dim, linear=_unit(dim, 0))
    e = _unit(dim, dim - 1)
    second = scalar_oracle(
        "exp_half_xd", dim, ridges=[Ridge(e, lambda t: np.exp(0.5 * t), lambda t: 0.5 * np.exp(0.5 * t), lambda t: 0.25 * np.exp(0.5 * t))]
    )
    return replace(combine_oracles(Combination.PRODUCT, [first, second]), name="root2")


def _constant(dim):
    return scalar_oracle("constant", dim, const=5.0)


def stack_oracles(name: str, components: Sequence[SmoothOracle]) -> SmoothOracle:
    """Mapping whose rows are the given scalar oracles."""
    comps = tuple(components)
    if not comps or any(not c.is_scalar for c in comps) or len({c.dim_in for c in comps}) != 1:
        raise DimensionMismatchError("stack_oracles needs scalar components of equal input dimension")
    smooth = min(c.smoothness for c in comps)
    return SmoothOracle(
        name,
        comps[0].dim_in,
        len(comps),
        smooth,
        lambda X: np.concatenate([c.value_fn(X) for c in comps], axis=1),
        (lambda X: np.concatenate([c.jac_fn(X) for c in comps], axis=1)) if smooth >= 1 else None,
        (lambda X: np.concatenate([c.hess_fn(X) for c in comps], axis=1)) if smooth >= 2 else None,
    )


def _map_linear(dim):
    rows = np.array([_spread(dim, 1.0, -0.5), _spread(dim, 0.25, 0.75)])
    if dim == 1:
        rows = np.array([[1.0], [0.5]])
    comps = [scalar_oracle(f"row{i}", dim, const=0.5 * i, linear=rows[i]) for i in range(2)]
    return stack_oracles("map_linear", comps)


def _map_nonlinear(dim):
    e0 = _unit(dim, 0)
    e1 = _unit(dim, 1 if dim > 1 else 0)
    c0 = scalar_oracle(
        "nl0", dim, quad=0.5 * np.outer(e1, e1), ridges=[Ridge(e0, np.sin, np.cos, lambda t: -np.sin(t))]
    )
    c1 = scalar_oracle(
        "nl1",
        dim,
        const=1.0,
        linear=0.3 * e0,
        ridges=[Ridge(e1 * 0.7, lambda t: 0.5 * np.cos(t), lambda t: -0.5 * np.sin(t), lambda t: -0.5 * np.cos(t))],
    )
    return stack_oracles("map_nonlinear", [c0, c1])


def _map_identity(dim):
    return stack_oracles("map_identity", [scalar_oracle(f"x{i}", dim, linear=_unit(dim, i)) for i in range(dim)])


SCALAR_BUILDERS: Mapping[str, Callable[[int], SmoothOracle]] = {
    "affine": _affine,
    "quadratic": _quadratic,
    "sphere": _sphere,
    "exp": _exp,
    "trig": _trig,
    "positive": _positive,
    "root": _root,
    "root2": _root2,
    "constant": _constant,
}

MAPPING_BUILDERS: Mapping[str, Callable[[int], SmoothOracle]] = {
    "map_linear": _map_linear,
    "map_nonlinear": _map_nonlinear,
    "map_identity": _map_identity,
}

CATALOGUE: Mapping[str, Callable[[int], SmoothOracle]] = {**SCALAR_BUILDERS, **MAPPING_BUILDERS}


def make_oracle(name: str, dim: int) -> SmoothOracle:
    try:
        builder = CATALOGUE[name]
    except KeyError:
        raise KeyError(f"unknown oracle {name!r}; known: {', '.join(sorted(CATALOGUE))}") from None
    return builder(int(dim))


def make_test_suite(dims: Sequence[int] = (1, 2, 3), mappings: bool = True) -> list[SmoothOracle]:
    """Every catalogue oracle in every requested dimension."""
    suite = [SCALAR_BUILDERS[name](d) for d in dims for name in SCALAR_BUILDERS]
    if mappings:
        suite += [MAPPING_BUILDERS[name](d) for d in dims for name in MAPPING_BUILDERS]
    return suite


# ---------------------------------------------------------------------------
# Combinators
# ---------------------------------------------------------------------------

class Combination(enum.Enum):
    PRODUCT = "product"
    QUOTIENT = "quotient"
    COMPOSITION = "composition"
    POWER = "power"


def _pairwise_excluded_products(V: np.ndarray) -> np.ndarray:
    """``P[:, i, j] = prod_{k != i, j} V[:, k]`` without division (zeros are common)."""
    n, p = V.shape
    P = np.ones((n, p, p))
    for i in range(p):
        P[:, i, i] = 0.0
        for j in range(p):
            if i == j:
                continue
            for k in range(p):
                if k != i and k != j:
                    P[:, i, j] *= V[:, k]
    return P


def _excluded_products(V: np.ndarray) -> np.ndarray:
    n, p = V.shape
    prefix = np.ones((n, p))
    suffix = np.ones((n, p))
    for i in range(1, p):
        prefix[:, i] = prefix[:, i - 1] * V[:, i - 1]
    for i in range(p - 2, -1, -1):
        suffix[:, i] = suffix[:, i + 1] * V[:, i + 1]
    return prefix * suffix


def _product(parts: Sequence[SmoothOracle]) -> SmoothOracle:
    d = parts[0].dim_in
    smooth = min(p.smoothness for p in parts)

    def values(X):
        return np.stack([p.value_fn(X)[:, 0] for p in parts], axis=1)

    def value(X):
        return np.prod(values(X), axis=1)[:, None]

    def jac(X):
        V = values(X)
        G = np.stack([p.jac_fn(X)[:, 0, :] for p in parts], axis=1)
        return np.einsum("ni,nid->nd", _excluded_products(V), G)[:, None, :]

    def hess(X):
        V = values(X)
        G = np.stack([p.jac_fn(X)[:, 0, :] for p in parts], axis=1)
        H = np.stack([p.hess_fn(X)[:, 0] for p in parts], axis=1)
        out = np.einsum("ni,nide->nde", _excluded_products(V), H)
        out += np.einsum("nij,nid,nje->nde", _pairwise_excluded_products(V), G, G)
        return out[:, None]

    name = "*".join(p.name for p in parts)
    return SmoothOracle(f"({name})", d, 1, smooth, value, jac if smooth >= 1 else None, hess if smooth >= 2 else None)


def _power(part: SmoothOracle, n: int) -> SmoothOracle:
    def value(X):
        return part.value_fn(X) ** n

    def jac(X):
        v = part.value_fn(X)[:, 0]
        return (n * v ** (n - 1))[:, None, None] * part.jac_fn(X)

    def hess(X):
        v = part.value_fn(X)[:, 0]
        g = part.jac_fn(X)[:, 0, :]
        out = (n * v ** (n - 1))[:, None, None] * part.hess_fn(X)[:, 0]
        if n >= 2:
            out = out + (n * (n - 1) * v ** (n - 2))[:, None, None] * np.einsum("nd,ne->nde", g, g)
        return out[:, None]

    s = part.smoothness
    return SmoothOracle(f"({part.name})^{n}", part.dim_in, 1, s, value, jac if s >= 1 else None, hess if s >= 2 else None)


def _quotient(num: SmoothOracle, den: SmoothOracle) -> SmoothOracle:
    def denominator(X):
        v2 = den.value_fn(X)[:, 0]
        zero = np.flatnonzero(v2 == 0.0)
        if zero.size:
            raise EvaluationError(f"{den.name} vanishes; quotient undefined", point=X[zero[0]])
        return v2

    def value(X):
        return (num.value_fn(X)[:, 0] / denominator(X))[:, None]

    def jac(X):
        v2 = denominator(X)
        v1 = num.value_fn(X)[:, 0]
        g1 = num.jac_fn(X)[:, 0, :]
        g2 = den.jac_fn(X)[:, 0, :]
        return (g1 / v2[:, None] - (v1 / v2**2)[:, None] * g2)[:, None, :]

    def hess(X):
        v2 = denominator(X)
        v1 = num.value_fn(X)[:, 0]
        g1 = num.jac_fn(X)[:, 0, :]
        g2 = den.jac_fn(X)[:, 0, :]
        H1 = num.hess_fn(X)[:, 0]
        H2 = den.hess_fn(X)[:, 0]
        cross = np.einsum("nd,ne->nde", g1, g2)
        out = H1 / v2[:, None, None]
        out = out - (cross + np.swapaxes(cross, 1, 2)) / (v2**2)[:, None, None]
        out = out - (v1 / v2**2)[:, None, None] * H2
        out = out + (2.0 * v1 / v2**3)[:, None, None] * np.einsum("nd,ne->nde", g2, g2)
        return out[:, None]

    s = min(num.smoothness, den.smoothness)
    return SmoothOracle(f"({num.name}/{den.name})", num.dim_in, 1, s, value, jac if s >= 1 else None, hess if s >= 2 else None)


def _composition(inner: SmoothOracle, outer: SmoothOracle) -> SmoothOracle:
    def value(X):
        return outer.value_fn(inner.value_fn(X))

    def jac(X):
        g = outer.jac_fn(inner.value_fn(X))[:, 0, :]
        return np.einsum("nkd,nk->nd", inner.jac_fn(X), g)[:, None, :]

    def hess(X):
        Y = inner.value_fn(X)
        J = inner.jac_fn(X)
        g = outer.jac_fn(Y)[:, 0, :]
        H2 = outer.hess_fn(Y)[:, 0]
        out = np.einsum("nkd,nkl,nle->nde", J, H2, J) + np.einsum("nk,nkde->nde", g, inner.hess_fn(X))
        return out[:, None]

    s = min(inner.smoothness, outer.smoothness)
    return SmoothOracle(f"{outer.name}({inner.name})", inner.dim_in, 1, s, value, jac if s >= 1 else None, hess if s >= 2 else None)


def combine_oracles(kind, parts: Sequence[SmoothOracle], power: int | None = None) -> SmoothOracle:
    """Exact product/quotient/chain-rule propagation of value, gradient and Hessian.

    ``kind`` is a :class:`Combination` or one of the strings ``"product"``,
    ``"quotient"``, ``"composition"``, ``"power"``; ``POWER`` takes the exponent
    from ``power`` and a single part.
    """
    kind = Combination(kind) if not isinstance(kind, Combination) else kind
    parts = tuple(parts)
    if not parts:
        raise DimensionMismatchError("combine_oracles needs at least one part")
    if kind is Combination.COMPOSITION:
        if len(parts) != 2:
            raise DimensionMismatchError("composition takes [inner, outer]")
        inner, outer = parts
        if not outer.is_scalar or outer.dim_in != inner.dim_out:
            raise DimensionMismatchError(
                f"cannot compose {outer.name}: R^{outer.dim_in}->R^{outer.dim_out} after "
                f"{inner.name}: R^{inner.dim_in}->R^{inner.dim_out}"
            )
        return _composition(inner, outer)
    if any(not p.is_scalar for p in parts):
        raise DimensionMismatchError(f"{kind.value} needs scalar parts")
    if len({p.dim_in for p in parts}) != 1:
        raise DimensionMismatchError(f"{kind.value} parts have different input dimensions")
    if kind is Combination.PRODUCT:
        if len(parts) < 2:
            raise DimensionMismatchError("product needs at least two parts")
        return _product(parts)
    if kind is Combination.QUOTIENT:
        if len(parts) != 2:
            raise DimensionMismatchError("quotient takes exactly [numerator, denominator]")
        return _quotient(*parts)
    if len(parts) != 1 or power is None or int(power) < 1:
        raise DimensionMismatchError("power takes one part and an integer exponent >= 1")
    return _power(parts[0], int(power))


def add_oracles(name: str, a: SmoothOracle, b: SmoothOracle) -> SmoothOracle:
    if (a.dim_in, a.dim_out) != (b.dim_in, b.dim_out):
        raise DimensionMismatchError("cannot add oracles of different shapes")
    s = min(a.smoothness, b.smoothness)
    return SmoothOracle(
        name,
        a.dim_in,
        a.dim_out,
        s,
        lambda X: a.value_fn(X) + b.value_fn(X),
        (lambda X: a.jac_fn(X) + b.jac_fn(X)) if s >= 1 else None,
        (lambda X: a.hess_fn(X) + b.hess_fn(X)) if s >= 2 else None,
    )


def constant_oracle(name: str, dim_in: int, value) -> SmoothOracle:
    v = np.atleast_1d(np.asarray(value, dtype=float))
    m = v.size

    return SmoothOracle(
        name,
        dim_in,
        m,
        3,
        lambda X: np.broadcast_to(v, (X.shape[0], m)).copy(),
        lambda X: np.zeros((X.shape[0], m, dim_in)),
        lambda X: np.zeros((X.shape[0], m, dim_in, dim_in)),
    )


# ---------------------------------------------------------------------------
# Model classes
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelClass:
    """Family of models ``{f~_Delta}`` for ``Delta`` in ``(0, delta_bar]``.

    ``certificates`` may be empty for freshly combined classes; the calculus
    module derives them.  ``base`` is the point all certificates refer to.
    """

    reference: SmoothOracle
    delta_bar: float
    factory: Callable[[float], SmoothOracle]
    certificates: tuple[AccuracyCertificate, ...] = ()
    base: tuple[float, ...] | None = None
    kind: str = "custom"
    parts: tuple["ModelClass", ...] = ()
    notes: tuple[str, ...] = field(default=())

    def __post_init__(self):
        db = float(self.delta_bar)
        if not (math.isfinite(db) and db > 0):
            raise ValueError("delta_bar must be positive")
        object.__setattr__(self, "delta_bar", db)
        if self.base is not None:
            object.__setattr__(self, "base", point_key(self.base))
        object.__setattr__(self, "certificates", tuple(self.certificates))
        for c in self.certificates:
            if c.delta_bar > db:
                raise ValueError("certificate radius cap exceeds the class delta_bar")
            if self.base is not None and c.base != self.base:
                raise CompositionError("certificate base differs from the class base point")

    def model(self, delta: float) -> SmoothOracle:
        delta = float(delta)
        if not (0.0 < delta <= self.delta_bar):
            raise ValueError(f"delta {delta} outside (0, {self.delta_bar}]")
        return self.factory(delta)

    def certificate(self, level: DerivativeLevel, locality: Locality) -> AccuracyCertificate | None:
        for c in self.certificates:
            if c.level is level and c.locality is locality:
                return c
        return None

    def with_certificates(self, certificates) -> "ModelClass":
        return replace(self, certificates=tuple(certificates))


def exact_class(ref: SmoothOracle, x0, delta_bar: float) -> ModelClass:
    """The trivial class ``f~_Delta = f``; every certificate is exact."""
    base = point_key(x0)
    certs = tuple(
        AccuracyCertificate(level, INFINITY, 0.0, loc, base, delta_bar, trace=("exact model",))
        for level in _levels_for(ref.smoothness)
        for loc in Locality
    )
    return ModelClass(ref, delta_bar, lambda delta: ref, certs, base, kind="exact")


def _levels_for(smoothness: int) -> tuple[DerivativeLevel, ...]:
    return (DerivativeLevel.FUNCTION, DerivativeLevel.GRADIENT, DerivativeLevel.HESSIAN)[: smoothness + 1]


@dataclass(frozen=True)
class LevelSpec:
    """Requested perturbation at one derivative level.

    ``locality`` is recorded but does not change the construction: the
    synthetic perturbation always carries both AT and NEAR certificates.
    ``sign`` flips the function-level bump, e.g. to push a denominator
    towards zero.
    """

    level: DerivativeLevel
    order: Order
    kappa: float
    locality: Locality = Locality.AT
    sign: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "level", DerivativeLevel(self.level))
        object.__setattr__(self, "order", Order.of(self.order))
        object.__setattr__(self, "locality", Locality(self.locality))
        kappa = float(self.kappa)
        if not (math.isfinite(kappa) and kappa >= 0):
            raise ValueError("kappa must be finite and >= 0")
        if self.order.is_infinite and kappa != 0.0:
            raise ValueError("order INFINITY requires kappa = 0")
        if self.sign not in (1.0, -1.0):
            raise ValueError("sign must be +1 or -1")
        object.__setattr__(self, "kappa", kappa)
        object.__setattr__(self, "sign", float(self.sign))

    @classmethod
    def coerce(cls, item) -> "LevelSpec":
        if isinstance(item, LevelSpec):
            return item
        return cls(*item)


def _effective(components, delta_bar: float, what: str):
    """Fold ``sum_c kappa_c Delta^N_c`` into one ``(order, kappa, trace)``."""
    active = [(k, o, label) for k, o, label in components if k > 0.0 and not o.is_infinite]
    if not active:
        return INFINITY, 0.0, (f"{what}: no active perturbation",)
    order = min(o for _, o, _ in active)
    kappa = math.fsum(scaled_kappa(k, delta_bar, o, order) for k, o, _ in active)
    trace = tuple(f"{what}: {label} kappa={k!r} order={o}" for k, o, label in active)
    return order, kappa, trace


def _random_directions(seed: int, d: int, m: int):
    rng = np.random.default_rng(seed)

    def unit(n):
        v = rng.standard_normal(n)
        return v / np.linalg.norm(v)

    a = unit(d)
    q = unit(d)
    R = rng.standard_normal((d, d))
    R = R + R.T
    R /= np.sqrt(np.sum(R * R))
    u = unit(m)
    return a, q, R, u


def make_synthetic_class(
    ref: SmoothOracle,
    spec: Sequence,
    delta_bar: float,
    seed: int,
    x0=None,
) -> ModelClass:
    """Model class ``ref + perturbation`` whose certificates are tight by construction.

    The perturbation is ``u * p(x)`` (``u`` a unit vector in ``R^m``) with

        p(x) = s c_f cos(a.(x-x0)) + c_g q.(x-x0) + 0.5 c_h (x-x0)^T R (x-x0),

    ``c_L = kappa_L Delta^N_L``, ``|a| = |q| = |R|_F = 1``.  At ``x0`` the
    function and gradient errors equal ``c_f`` and ``c_g`` exactly.  The cosine
    also contributes ``c_f |x-x0|`` to gradients and ``c_f`` to Hessians, the
    linear term ``c_g Delta`` to values, and the quadratic term ``c_h Delta`` to
    gradients and ``c_h Delta^2 / 2`` to values on the ball; the certificates
    carry these cross terms, weakened to the smallest order.

    Parameters
    ----------
    ref : SmoothOracle
        Reference function or mapping.
    spec : sequence of LevelSpec or tuples ``(level, order, kappa, locality[, sign])``
        At most one entry per level; omitted levels are exact.
    delta_bar : float
        Radius cap of the class.
    seed : int
        Selects ``a``, ``q``, ``R`` and ``u``.
    x0 : array_like, optional
        Base point (origin by default).
    """
    d, m = ref.dim_in, ref.dim_out
    x0 = np.zeros(d) if x0 is None else as_center(x0)
    if x0.size != d:
        raise DimensionMismatchError("base point dimension differs from the reference")
    base = point_key(x0)
    levels: dict[DerivativeLevel, LevelSpec] = {}
    for item in spec:
        ls = LevelSpec.coerce(item)
        if ls.level in levels:
            raise ValueError(f"duplicate perturbation for level {ls.level.value}")
        needed = {DerivativeLevel.FUNCTION: 0, DerivativeLevel.GRADIENT: 1, DerivativeLevel.HESSIAN: 2}[ls.level]
        if ref.smoothness < needed:
            raise SmoothnessError(f"{ls.level.value} perturbation needs a C{needed} reference, got C{ref.smoothness}")
        levels[ls.level] = ls

    def comp(level):
        ls = levels.get(level)
        return (0.0, INFINITY, 1.0) if ls is None else (ls.kappa, ls.order, ls.sign)

    kf, nf, sf = comp(DerivativeLevel.FUNCTION)
    kg, ng, _ = comp(DerivativeLevel.GRADIENT)
    kh, nh, _ = comp(DerivativeLevel.HESSIAN)
    a, q, R, u = _random_directions(seed, d, m)
    aa = np.outer(a, a)

    def coeffs(delta):
        def c(k, n):
            return 0.0 if k == 0.0 else k * delta ** n.value

        return sf * c(kf, nf), c(kg, ng), c(kh, nh)

    def perturbation(delta):
        cf, cg, ch = coeffs(delta)

        def value(X):
            Z = X - x0
            p = cf * np.cos(Z @ a) + cg * (Z @ q) + 0.5 * ch * np.einsum("ni,ij,nj->n", Z, R, Z)
            return p[:, None] * u[None, :]

        def jac(X):
            Z = X - x0
            g = -cf * np.sin(Z @ a)[:, None] * a[None, :] + cg * q[None, :] + ch * Z @ R
            return u[None, :, None] * g[:, None, :]

        def hess(X):
            Z = X - x0
            H = -cf * np.cos(Z @ a)[:, None, None] * aa[None] + ch * R[None]
            return u[None, :, None, None] * H[:, None]

        return SmoothOracle(f"perturbation[{delta!r}]", d, m, 3, value, jac, hess)

    def factory(delta):
        return add_oracles(f"{ref.name}~{delta!r}", ref, perturbation(delta))

    def plus(n, k):
        return n if n.is_infinite else Order(n.value + k)

    table = {
        (DerivativeLevel.FUNCTION, Locality.AT): [(kf, nf, "cosine")],
        (DerivativeLevel.GRADIENT, Locality.AT): [(kg, ng, "linear")],
        (DerivativeLevel.HESSIAN, Locality.AT): [(kf, nf, "cosine curvature"), (kh, nh, "quadratic")],
        (DerivativeLevel.FUNCTION, Locality.NEAR): [(kf, nf, "cosine"), (kg, plus(ng, 1), "linear"), (0.5 * kh, plus(nh, 2), "quadratic")],
        (DerivativeLevel.GRADIENT, Locality.NEAR): [(kf, plus(nf, 1), "cosine slope"), (kg, ng, "linear"), (kh, plus(nh, 1), "quadratic slope")],
        (DerivativeLevel.HESSIAN, Locality.NEAR): [(kf, nf, "cosine curvature"), (kh, nh, "quadratic")],
    }
    certs = []
    for level in _levels_for(ref.smoothness):
        for loc in Locality:
            order, kappa, trace = _effective(table[(level, loc)], delta_bar, f"{level.value}/{loc.value}")
            certs.append(AccuracyCertificate(level, order, kappa, loc, base, delta_bar, trace=trace))
    notes = tuple(f"requested {ls.level.value} order {ls.order} kappa {ls.kappa!r} ({ls.locality.value})" for ls in levels.values())
    return ModelClass(ref, delta_bar, factory, tuple(certs), base, kind="synthetic", notes=notes)


def affine_oracle(name: str, value0: float, grad: np.ndarray, x0: np.ndarray) -> SmoothOracle:
    g = np.asarray(grad, dtype=float)
    d = g.size
    return SmoothOracle(
        name,
        d,
        1,
        3,
        lambda X: (value0 + (X - x0) @ g)[:, None],
        lambda X: np.broadcast_to(g, (X.shape[0], 1, d)).copy(),
        lambda X: np.zeros((X.shape[0], 1, d, d)),
    )


def make_interpolation_class(
    ref: SmoothOracle,
    x0,
    delta_bar: float,
    n_sample: int = 256,
    seed: int = 0,
) -> ModelClass:
    """Affine interpolation of ``ref`` on the simplex ``{x0, x0 + Delta e_i}``.

    With ``L`` the sampled maximum of the Hessian norm over ``B_delta_bar(x0)``
    the class is fully linear:

    * gradient near ``x0``: ``L (1 + sqrt(d)/2) Delta``; at ``x0`` ``sqrt(d) L Delta / 2``;
    * function near ``x0``: ``L (1 + sqrt(d)) Delta^2 / 2``; exact at ``x0``;
    * Hessian: order 0 with constant ``L`` (the model Hessian is zero).
    """
    if not ref.is_scalar:
        raise DimensionMismatchError("interpolation needs a scalar reference")
    if ref.smoothness < 2:
        raise SmoothnessError("interpolation certificates need a C2 reference")
    x0 = as_center(x0)
    if x0.size != ref.dim_in:
        raise DimensionMismatchError("base point dimension differs from the reference")
    d = x0.size
    base = point_key(x0)
    ball = Ball(base, delta_bar)
    L = oracle_sup(ref, Quantity.NORM_HESS, ball.sample(n_sample, seed))
    if not math.isfinite(L):
        raise EstimationError("Hessian bound on the interpolation ball is not finite")
    # Extended precision keeps f~(x0) = f(x0) exact when errors are measured in long double.
    f0 = ref.value(extended(x0))
    sd = math.sqrt(d)

    def factory(delta):
        pts = extended(x0)[None, :] + delta * np.eye(d)
        g = (ref.eval_batch(pts)[:, 0] - f0) / delta
        return affine_oracle(f"interp[{ref.name},{delta!r}]", f0, g, x0)

    src = (f"sampled Hessian bound L={L!r} ({n_sample} interior points)",)

    def cert(level, loc, order, kappa, why):
        if kappa == 0.0:
            order = INFINITY
        return AccuracyCertificate(level, order, kappa, loc, base, delta_bar, trace=src + (why,))

    certs = (
        cert(DerivativeLevel.FUNCTION, Locality.AT, INFINITY, 0.0, "interpolates at x0"),
        cert(DerivativeLevel.FUNCTION, Locality.NEAR, Order(2), L * (1.0 + sd) / 2.0, "L(1+sqrt(d))/2"),
        cert(DerivativeLevel.GRADIENT, Locality.AT, Order(1), sd * L / 2.0, "sqrt(d) L/2"),
        cert(DerivativeLevel.GRADIENT, Locality.NEAR, Order(1), L * (1.0 + sd / 2.0), "L(1+sqrt(d)/2)"),
        cert(DerivativeLevel.HESSIAN, Locality.AT, Order(0), L, "model Hessian is zero"),
        cert(DerivativeLevel.HESSIAN, Locality.NEAR, Order(0), L, "model Hessian is zero"),
    )
    return ModelClass(ref, delta_bar, factory, certs, base, kind="interpolation", notes=("provenance: sampled",))


def combine_model_classes(kind, parts: Sequence[ModelClass], power: int | None = None) -> ModelClass:
    """Class whose model at ``Delta`` combines the parts' models at the same ``Delta``."""
    kind = Combination(kind) if not isinstance(kind, Combination) else kind
    parts = tuple(parts)
    if not parts:
        raise DimensionMismatchError("need at least one part")
    if kind is Combination.COMPOSITION:
        if len(parts) != 2:
            raise DimensionMismatchError("composition takes [inner, outer]")
        inner, outer = parts
        if inner.base is None:
            raise CompositionError("inner class needs a base point")
        image = base_value(inner.reference, inner.base)
        if outer.base is not None and outer.base != image:
            raise CompositionError("outer certificates are not based at f1(x0)")
        base = inner.base
    else:
        bases = {p.base for p in parts}
        if len(bases) != 1:
            raise CompositionError("parts have different base points")
        base = bases.pop()
    delta_bar = min(p.delta_bar for p in parts)
    refs = [p.reference for p in parts]
    reference = combine_oracles(kind, refs, power)

    def factory(delta):
        return combine_oracles(kind, [p.model(delta) for p in parts], power)

    label = kind.value if power is None else f"{kind.value}{power}"
    return ModelClass(reference, delta_bar, factory, (), base, kind=label, parts=parts)


def base_value(oracle: SmoothOracle, base) -> tuple[float, ...]:
    """``oracle(base)`` evaluated in extended precision, rounded for bookkeeping."""
    return point_key(oracle.value(extended(base)))


def shifted_oracle(model: SmoothOracle, shift: float) -> SmoothOracle:
    """``model + shift`` sharing the derivative kernels (bitwise-identical derivatives)."""
    return SmoothOracle(
        f"{model.name}+shift",
        model.dim_in,
        model.dim_out,
        model.smoothness,
        lambda X: model.value_fn(X) + shift,
        model.jac_fn,
        model.hess_fn,
    )


def shift_to_interpolate(mc: ModelClass) -> ModelClass:
    """Translate every model so it matches the reference value at the base point."""
    if not mc.reference.is_scalar:
        raise DimensionMismatchError("shift needs a scalar class")
    if mc.base is None:
        raise CompositionError("shift needs a class with a base point")
    x0 = extended(mc.base)
    f0 = mc.reference.value(x0)

    def factory(delta):
        model = mc.model(delta)
        return shifted_oracle(model, f0 - model.value(x0))

    certs = []
    for c in mc.certificates:
        if c.level is DerivativeLevel.FUNCTION and c.locality is Locality.AT:
            c = AccuracyCertificate(c.level, INFINITY, 0.0, c.locality, c.base, c.delta_bar, trace=("shifted: exact at x0",))
        elif c.level is DerivativeLevel.FUNCTION:
            c = AccuracyCertificate(
                c.level, c.order, 2.0 * c.kappa, c.locality, c.base, c.delta_bar,
                trace=c.trace + ("shifted: triangle inequality doubles kappa",),
            )
        certs.append(c)
    if not any(c.level is DerivativeLevel.FUNCTION and c.locality is Locality.AT for c in certs):
        certs.append(AccuracyCertificate(DerivativeLevel.FUNCTION, INFINITY, 0.0, Locality.AT, mc.base, mc.delta_bar, trace=("shifted: exact at x0",)))
    return ModelClass(mc.reference, mc.delta_bar, factory, tuple(certs), mc.base, kind="shift", parts=(mc,))
