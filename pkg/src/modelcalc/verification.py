"""Empirical checks: measured errors over Delta grids, order fits, bound checks.

All sampling is deterministic: ball samples come from :meth:`Ball.sample`
with fixed seeds, so repeated runs give bitwise-identical series.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core import (
    Ball,
    CombinedBound,
    DerivativeLevel,
    EstimationError,
    EvaluationError,
    Locality,
    Provenance,
    Quantity,
    UniformBound,
    as_point,
    point_key,
)
from .oracles import (
    ModelClass,
    SmoothOracle,
    add_oracles,
    combine_oracles,
    constant_oracle,
    level_norms,
    make_oracle,
    oracle_sup,
    scalar_oracle,
)

EXACT_THRESHOLD = 1e-14
BOUND_RTOL = 1e-9
# float64 cancellation leaves ~1e-7 relative noise on errors near 1e-9; extended precision
# (80-bit on x86-64) resolves them.  Platforms where longdouble is float64 get no gain.
MEASURE_DTYPE = np.longdouble
NEAR_INTERIOR = 64
BOUND_INTERIOR = 256


@dataclass(frozen=True)
class DeltaGrid:
    """Strictly decreasing radii, at least four of them."""

    deltas: tuple[float, ...]

    def __post_init__(self):
        d = tuple(float(x) for x in self.deltas)
        if len(d) < 4:
            raise ValueError("a delta grid needs at least 4 points")
        if any(not (math.isfinite(x) and x > 0) for x in d):
            raise ValueError("grid radii must be positive and finite")
        if any(b >= a for a, b in zip(d, d[1:])):
            raise ValueError("grid radii must be strictly decreasing")
        object.__setattr__(self, "deltas", d)

    @classmethod
    def geometric(cls, start: float = 0.125, ratio: float = 0.5, count: int = 8) -> "DeltaGrid":
        if not 0 < ratio < 1:
            raise ValueError("geometric grid ratio must lie in (0, 1)")
        return cls(tuple(start * ratio**k for k in range(int(count))))

    def __iter__(self):
        return iter(self.deltas)

    def __len__(self):
        return len(self.deltas)


@dataclass(frozen=True)
class ErrorPoint:
    delta: float
    error: float
    bound: float | None = None
    divergent: bool = False


@dataclass(frozen=True)
class ErrorSeries:
    level: DerivativeLevel
    locality: Locality
    points: tuple[ErrorPoint, ...]

    @property
    def deltas(self) -> np.ndarray:
        return np.array([p.delta for p in self.points])

    @property
    def errors(self) -> np.ndarray:
        return np.array([p.error for p in self.points])

    @property
    def divergent(self) -> bool:
        return any(p.divergent for p in self.points)

    def with_bound(self, bound: CombinedBound) -> "ErrorSeries":
        pts = tuple(ErrorPoint(p.delta, p.error, bound.bound(p.delta), p.divergent) for p in self.points)
        return ErrorSeries(self.level, self.locality, pts)


def _level_values(oracle: SmoothOracle, level: DerivativeLevel, X: np.ndarray) -> np.ndarray:
    return oracle.level_batch(level, X)


def measure_errors(
    mc: ModelClass,
    truth: SmoothOracle,
    level: DerivativeLevel,
    locality: Locality,
    grid: DeltaGrid | Sequence[float],
    x0,
    n_interior: int = NEAR_INTERIOR,
    seed: int = 0,
) -> ErrorSeries:
    """Error of ``mc.model(delta)`` against ``truth`` at each grid radius.

    AT uses ``x0`` only; NEAR takes the maximum over ``Ball(x0, delta).sample``.
    A model that cannot be evaluated (e.g. a pole of a quotient) marks the
    point DIVERGENT with an infinite error.  Errors are evaluated in
    ``MEASURE_DTYPE`` so that errors of order ``1e-9`` are resolved well below
    the relative bound tolerance.
    """
    level, locality = DerivativeLevel(level), Locality(locality)
    grid = grid if isinstance(grid, DeltaGrid) else DeltaGrid(tuple(grid))
    x0 = as_point(x0)
    if max(grid.deltas) > mc.delta_bar:
        raise ValueError(f"grid exceeds the class delta_bar {mc.delta_bar!r}")
    points = []
    for delta in grid:
        X = x0[None, :] if locality is Locality.AT else Ball(point_key(x0), delta).sample(n_interior, seed)
        X = X.astype(MEASURE_DTYPE)
        try:
            diff = _level_values(mc.model(delta), level, X) - _level_values(truth, level, X)
            err = float(np.max(level_norms(diff)))
            divergent = not math.isfinite(err)
        except (EvaluationError, FloatingPointError, ZeroDivisionError):
            err, divergent = math.inf, True
        points.append(ErrorPoint(delta, math.inf if divergent else err, None, divergent))
    return ErrorSeries(level, locality, tuple(points))


@dataclass(frozen=True)
class OrderEstimate:
    """Least-squares slope of ``log(error)`` against ``log(delta)``.

    ``exact`` is set (slope ``inf``) when every usable error is at most
    ``1e-14``; ``divergent`` when some grid points were dropped as DIVERGENT.
    """

    slope: float
    intercept: float
    r_squared: float
    window: tuple[float, float]
    exact: bool = False
    divergent: bool = False
    n_points: int = 0


def estimate_order(series: ErrorSeries) -> OrderEstimate:
    finite = [p for p in series.points if not p.divergent]
    divergent = len(finite) < len(series.points)
    if finite and all(p.error <= EXACT_THRESHOLD for p in finite) and not divergent:
        ds = [p.delta for p in finite]
        return OrderEstimate(math.inf, -math.inf, 1.0, (min(ds), max(ds)), exact=True, n_points=len(finite))
    usable = [p for p in finite if p.error > EXACT_THRESHOLD]
    if len(usable) < 4:
        raise EstimationError(f"order fit needs >= 4 usable points, got {len(usable)}")
    x = np.log([p.delta for p in usable])
    y = np.log([p.error for p in usable])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0.0 else max(0.0, 1.0 - float(np.sum(resid**2)) / ss_tot)
    ds = [p.delta for p in usable]
    return OrderEstimate(float(slope), float(intercept), r2, (min(ds), max(ds)), divergent=divergent, n_points=len(usable))


@dataclass(frozen=True)
class BoundVerdict:
    passed: bool
    worst_ratio: float
    worst_delta: float | None
    tag: str
    diagnostic: str = ""


def check_bound(series: ErrorSeries, bound: CombinedBound) -> BoundVerdict:
    """PASS iff ``error <= K * delta**N * (1 + 1e-9)`` at every grid radius."""
    if series.level is not bound.level or series.locality is not bound.locality:
        raise ValueError("series and bound describe different levels/localities")
    worst, worst_delta = 0.0, None
    for p in series.points:
        if p.divergent:
            return BoundVerdict(False, math.inf, p.delta, bound.tag, f"evaluation diverged at delta={p.delta!r}")
        b = bound.bound(p.delta)
        if b > 0:
            ratio = p.error / b
        else:
            ratio = 0.0 if p.error == 0.0 else math.inf
        if worst_delta is None or ratio > worst:
            worst, worst_delta = ratio, p.delta
    passed = worst <= 1.0 + BOUND_RTOL
    diag = "" if passed else f"error exceeds bound by factor {worst!r} at delta={worst_delta!r}"
    return BoundVerdict(passed, worst, worst_delta, bound.tag, diag)


def sample_uniform_bound(
    oracle: SmoothOracle,
    quantity: Quantity,
    ball: Ball,
    n_interior: int = BOUND_INTERIOR,
    seed: int = 0,
    locality: Locality = Locality.NEAR,
) -> UniformBound:
    """Sampled maximum of ``quantity`` over ``ball`` (SAMPLED provenance)."""
    quantity = Quantity(quantity)
    value = oracle_sup(oracle, quantity, ball.sample(n_interior, seed))
    return UniformBound(quantity, value, locality, ball.center, ball.radius, provenance=Provenance.SAMPLED)


@dataclass(frozen=True)
class FDPoint:
    point: tuple[float, ...]
    grad_error: float
    hess_error: float | None


@dataclass(frozen=True)
class FDReport:
    oracle: str
    passed: bool
    max_grad_error: float
    max_hess_error: float | None
    points: tuple[FDPoint, ...] = field(default=(), repr=False)


def finite_difference_check(
    oracle: SmoothOracle,
    points,
    grad_tol: float = 1e-5,
    hess_tol: float = 1e-3,
) -> FDReport:
    """Central-difference check of analytic gradients and Hessians.

    Gradients are differenced from values and Hessians from analytic
    gradients, with step ``1e-5 (1 + ||x||)``.  Errors are relative to
    ``max(1, ||analytic||)``.
    """
    P = np.atleast_2d(np.asarray(points, dtype=float))
    d = oracle.dim_in
    with_hess = oracle.smoothness >= 2
    results = []
    for x in P:
        h = 1e-5 * (1.0 + float(np.linalg.norm(x)))
        E = h * np.eye(d)
        plus, minus = x[None, :] + E, x[None, :] - E
        J = oracle.jac_batch(x[None, :])[0]
        fd = ((oracle.eval_batch(plus) - oracle.eval_batch(minus)) / (2 * h)).T
        g_err = float(np.linalg.norm(fd - J) / max(1.0, np.linalg.norm(J)))
        h_err = None
        if with_hess:
            Hs = oracle.hess_batch(x[None, :])[0]
            fdh = (oracle.jac_batch(plus) - oracle.jac_batch(minus)) / (2 * h)
            fdh = np.transpose(fdh, (1, 2, 0))
            h_err = float(np.linalg.norm(fdh - Hs) / max(1.0, np.linalg.norm(Hs)))
        results.append(FDPoint(tuple(map(float, x)), g_err, h_err))
    mg = max(r.grad_error for r in results)
    mh = max(r.hess_error for r in results) if with_hess else None
    passed = mg <= grad_tol and (mh is None or mh <= hess_tol)
    return FDReport(oracle.name, passed, mg, mh, tuple(results))


# ---------------------------------------------------------------------------
# Counterexamples
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CounterexampleResult:
    name: str
    level: DerivativeLevel
    series: ErrorSeries
    ratios: tuple[float, ...]
    expected: tuple[float, ...]
    passed: bool


@dataclass(frozen=True)
class CounterexampleReport:
    results: tuple[CounterexampleResult, ...]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)


def _divergence(name, level, series, expected, halvings=4, min_ratio=1.9) -> CounterexampleResult:
    errs = series.errors
    tail = errs[-(halvings + 1):]
    ratios = tuple(float(b / a) for a, b in zip(tail, tail[1:]))
    ok = all(math.isfinite(q) and q >= min_ratio for q in ratios)
    ok = ok and all(
        math.isclose(e, x, rel_tol=1e-9, abs_tol=0.0) for e, x in zip(errs, expected)
    )
    return CounterexampleResult(name, level, series, ratios, tuple(expected), ok)


def _reciprocal(dim: int) -> SmoothOracle:
    """``1/y`` on ``R^1``; not part of the catalogue (unbounded near 0)."""
    if dim != 1:
        raise ValueError("reciprocal oracle is one-dimensional")
    return SmoothOracle(
        "reciprocal",
        1,
        1,
        3,
        lambda Y: 1.0 / Y,
        lambda Y: (-1.0 / Y**2)[:, :, None],
        lambda Y: (2.0 / Y**3)[:, :, None, None],
    )


def run_counterexamples(grid: DeltaGrid | None = None) -> CounterexampleReport:
    """Model families violating an order hypothesis, with diverging errors.

    * product: ``f~1 = f1 + 1/Delta`` (function order 0), gradient error
      ``||grad f2(x0)|| / Delta``;
    * quotient: ``f1 = f~1 = f2 = 1``, ``f~2 = Delta`` (denominator order 0),
      function error ``|1 - 1/Delta|``;
    * composition: ``f1 = 1``, ``f~1 = Delta`` (inner order 0),
      ``f2 = f~2 = 1/y``, function error ``|1 - 1/Delta|``.
    """
    grid = grid or DeltaGrid.geometric()
    db = max(grid.deltas)
    results = []

    x0 = np.zeros(2)
    f1, f2 = make_oracle("quadratic", 2), make_oracle("trig", 2)
    truth = combine_oracles("product", [f1, f2])
    mc = ModelClass(
        truth,
        db,
        lambda delta: combine_oracles("product", [add_oracles("f1+1/delta", f1, constant_oracle("c", 2, 1.0 / delta)), f2]),
    )
    series = measure_errors(mc, truth, DerivativeLevel.GRADIENT, Locality.AT, grid, x0)
    g2 = float(np.linalg.norm(f2.grad(x0)))
    results.append(_divergence("product", DerivativeLevel.GRADIENT, series, [g2 / d for d in grid]))

    one = scalar_oracle("one", 1, const=1.0)
    truth = combine_oracles("quotient", [one, one])
    mc = ModelClass(truth, db, lambda delta: combine_oracles("quotient", [one, constant_oracle("delta", 1, delta)]))
    series = measure_errors(mc, truth, DerivativeLevel.FUNCTION, Locality.AT, grid, np.zeros(1))
    results.append(_divergence("quotient", DerivativeLevel.FUNCTION, series, [abs(1 - 1 / d) for d in grid]))

    recip = _reciprocal(1)
    truth = combine_oracles("composition", [one, recip])
    mc = ModelClass(truth, db, lambda delta: combine_oracles("composition", [constant_oracle("delta", 1, delta), recip]))
    series = measure_errors(mc, truth, DerivativeLevel.FUNCTION, Locality.AT, grid, np.zeros(1))
    results.append(_divergence("composition", DerivativeLevel.FUNCTION, series, [abs(1 - 1 / d) for d in grid]))
    return CounterexampleReport(tuple(results))
