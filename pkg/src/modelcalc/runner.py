"""Fold a configured combination tree through the calculus and verify it."""
from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .calculus import (
    BoundInputs,
    PartInputs,
    composition_bound,
    image_gradient_bound,
    power_bound,
    product2_bound,
    productN_bound,
    quotient_bound,
    zero_factor_refinement,
)
from .config import ExperimentConfig, LeafSpec, TreeSpec
from .core import (
    AccuracyCertificate,
    Ball,
    CombinedBound,
    DerivativeLevel,
    DivisionDomainError,
    EstimationError,
    Locality,
    ModelCalcError,
    Order,
    PreconditionError,
    Provenance,
    Quantity,
    Side,
    SmoothnessError,
    TraceTerm,
    UniformBound,
    as_center,
    extended,
    point_key,
)
from .oracles import (
    Combination,
    ModelClass,
    base_value,
    SmoothOracle,
    combine_model_classes,
    exact_class,
    make_interpolation_class,
    make_oracle,
    make_synthetic_class,
    oracle_sup,
    shift_to_interpolate,
)
from .verification import (
    BOUND_INTERIOR,
    BOUND_RTOL,
    BoundVerdict,
    DeltaGrid,
    ErrorSeries,
    OrderEstimate,
    check_bound,
    estimate_order,
    measure_errors,
)

SLOPE_WINDOW = (-0.15, 0.35)
PAIRS = tuple((lv, loc) for lv in DerivativeLevel for loc in Locality)
_MODEL_QUANTITIES = (Quantity.NORM_GRAD, Quantity.NORM_HESS, Quantity.NORM_THIRD)


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CheckResult:
    level: DerivativeLevel
    locality: Locality
    status: str
    expect: str
    expected_order: Order | None
    bound: CombinedBound | None
    series: ErrorSeries | None
    estimate: OrderEstimate | None
    verdict: BoundVerdict | None
    diagnostic: str = ""
    rule: str = ""

    @property
    def ok(self) -> bool:
        return self.status == self.expect

    @property
    def tag(self) -> str:
        if self.bound is not None:
            return self.bound.tag
        return f"{self.rule}/{self.level.value}-{self.locality.value}"


@dataclass(frozen=True)
class ExperimentResult:
    config: ExperimentConfig
    checks: tuple[CheckResult, ...]
    bounds: dict = field(compare=False)
    failures: dict = field(compare=False)
    delta_bar: float = 0.0

    @property
    def exit_status(self) -> int:
        return 0 if all(c.ok for c in self.checks) else 1


# ---------------------------------------------------------------------------
# Tree evaluation
# ---------------------------------------------------------------------------

@dataclass
class _Node:
    mc: ModelClass
    part: PartInputs
    bounds: dict
    failures: dict
    delta_bar: float
    rule: str = "leaf"


@dataclass
class _Ctx:
    cfg: ExperimentConfig
    model_deltas: tuple[float, ...]
    leaf_index: int = 0


def _leaf_seed(cfg_seed: int, leaf_seed: int) -> int:
    return int(np.random.SeedSequence([cfg_seed, leaf_seed]).generate_state(1)[0])


def _safe_sup(oracle, quantity, X):
    try:
        return oracle_sup(oracle, quantity, X)
    except (EstimationError, SmoothnessError, FloatingPointError):
        return None


def _truth_bounds(oracle: SmoothOracle, base, delta_bar, radius, seed) -> list[UniformBound]:
    """Exact values at ``base`` (AT) and sampled maxima over ``B_radius(base)`` (NEAR)."""
    x0 = np.asarray(base)[None, :]
    X = Ball(point_key(base), radius).sample(BOUND_INTERIOR, seed)
    at_q = [Quantity.NORM_GRAD, Quantity.NORM_HESS]
    if oracle.is_scalar:
        at_q += [Quantity.ABS_F, Quantity.ABS_RECIP]
    out = []
    for q in at_q:
        v = _safe_sup(oracle, q, x0)
        if v is not None and math.isfinite(v):
            out.append(UniformBound(q, v, Locality.AT, base, delta_bar))
    for q in at_q + [Quantity.IMAGE_GRAD]:
        v = _safe_sup(oracle, q, X)
        if v is not None and math.isfinite(v):
            out.append(UniformBound(q, v, Locality.NEAR, base, delta_bar, provenance=Provenance.SAMPLED))
    return out


def _model_bounds(mc: ModelClass, base, delta_bar, radius, deltas, seed) -> list[UniformBound]:
    """Sampled model-side maxima over ``B_radius(base)`` and every model radius in ``deltas``."""
    X = Ball(point_key(base), radius).sample(BOUND_INTERIOR, seed)
    out = []
    for q in _MODEL_QUANTITIES:
        vals = [_safe_sup(mc.model(d), q, X) for d in deltas]
        if vals and all(v is not None and math.isfinite(v) for v in vals):
            out.append(UniformBound(q, max(vals), Locality.NEAR, base, delta_bar, Provenance.SAMPLED, Side.MODEL))
    return out


def _apply_overrides(bounds, overrides, base, delta_bar):
    keyed = {(b.quantity, b.locality, b.side): b for b in bounds}
    for o in overrides:
        keyed[(o.quantity, o.locality, o.side)] = UniformBound(
            o.quantity, o.value, o.locality, base, delta_bar, Provenance.ANALYTIC, o.side
        )
    return list(keyed.values())


def _cert_bound(cert: AccuracyCertificate, tag: str) -> CombinedBound:
    term = TraceTerm(f"{tag}/{cert.level.value}-{cert.locality.value}", "; ".join(cert.trace) or "certificate", cert.kappa)
    return CombinedBound(cert.level, cert.locality, cert.order, cert.kappa, (term,), cert.delta_bar, cert.base)


def _calculus(kind: str, exponent, level, loc, inputs: BoundInputs) -> CombinedBound:
    if kind == "product":
        if inputs.n == 2:
            return product2_bound(level, loc, inputs)
        return productN_bound(level, loc, inputs, inputs.n)
    if kind == "power":
        return power_bound(level, inputs, exponent, loc)
    if kind == "quotient":
        return quotient_bound(level, loc, inputs)
    if kind == "compose":
        return composition_bound(level, loc, inputs)
    raise ValueError(f"no calculus rule for {kind!r}")


def _rule(tree: TreeSpec) -> str:
    if isinstance(tree, LeafSpec):
        return tree.kind
    if tree.kind == "product":
        return "product2" if len(tree.children) == 2 else "productN"
    return {"compose": "composition"}.get(tree.kind, tree.kind)


def _finish(ctx, mc, bounds, failures, delta_bar, base, radius, model_radius=None, overrides=()):
    """Restate certificates at the node radius cap and attach truth bounds for the parent."""
    certs = tuple(replace(b.as_certificate(), delta_bar=delta_bar) for b in bounds.values())
    mc = replace(mc, delta_bar=delta_bar, certificates=certs, base=point_key(base))
    truth = _truth_bounds(mc.reference, base, delta_bar, max(radius, delta_bar), ctx.cfg.seed)
    if model_radius is not None:
        truth += _model_bounds(mc, base, delta_bar, model_radius, ctx.model_deltas, ctx.cfg.seed)
    truth = _apply_overrides(truth, overrides, point_key(base), delta_bar)
    value = base_value(mc.reference, base)
    part = PartInputs(certs, tuple(truth), value, label=mc.reference.name)
    return _Node(mc, part, dict(bounds), dict(failures), delta_bar)


def _evaluate(tree: TreeSpec, base, delta_bar, ctx: _Ctx, radius=None, model_radius=None) -> _Node:
    radius = delta_bar if radius is None else radius
    dim = len(base)
    x0 = as_center(base)
    if isinstance(tree, LeafSpec):
        ctx.leaf_index += 1
        overrides = [o for o in ctx.cfg.bounds if o.leaf == ctx.leaf_index]
        oracle = make_oracle(tree.oracle, dim)
        if tree.kind == "exact":
            mc = exact_class(oracle, x0, delta_bar)
        elif tree.kind == "interp":
            mc = make_interpolation_class(oracle, x0, delta_bar, seed=ctx.cfg.seed)
        else:
            mc = make_synthetic_class(oracle, tree.levels, delta_bar, _leaf_seed(ctx.cfg.seed, tree.seed), x0=x0)
        bounds = {(c.level, c.locality): _cert_bound(c, tree.kind) for c in mc.certificates}
        return _finish(ctx, mc, bounds, {}, delta_bar, base, radius, model_radius, overrides)

    if tree.kind == "shift":
        child = _evaluate(tree.children[0], base, delta_bar, ctx, radius, model_radius)
        mc = shift_to_interpolate(child.mc)
        bounds = {(c.level, c.locality): _cert_bound(c, "shift") for c in mc.certificates}
        return _finish(ctx, mc, bounds, child.failures, child.delta_bar, base, radius, model_radius)

    if tree.kind == "compose":
        inner = _evaluate(tree.children[0], base, delta_bar, ctx, radius)
        mbar = image_gradient_bound(inner.mc.reference, Ball(point_key(base), radius), seed=ctx.cfg.seed)
        # The outer center stays in extended precision so exact-at-x0 inner models hit it exactly.
        y0 = np.atleast_1d(inner.mc.reference.value(extended(base)))
        db2 = delta_bar * max(1.0, mbar.value)
        c1 = inner.mc.certificate(DerivativeLevel.FUNCTION, Locality.NEAR)
        shift = 0.0 if c1 is None or c1.is_exact else c1.kappa * delta_bar ** c1.order.value
        # Outer bounds are sampled over the model image f~1(B_D), padded by the inner function error.
        image_radius = max(db2, mbar.value * radius + shift)
        outer = _evaluate(tree.children[1], y0, db2, ctx, image_radius, model_radius=image_radius)
        kept = tuple(b for b in inner.part.bounds if b.quantity is not Quantity.IMAGE_GRAD)
        inner_part = replace(inner.part, bounds=kept + (replace(mbar, delta_bar=inner.delta_bar),))
        parts = (inner_part, outer.part)
        mcs = (inner.mc, outer.mc)
        child_db = inner.delta_bar
    else:
        children = [_evaluate(c, base, delta_bar, ctx, radius) for c in tree.children]
        parts = tuple(c.part for c in children)
        mcs = tuple(c.mc for c in children)
        child_db = min(c.delta_bar for c in children)

    kind = {"product": Combination.PRODUCT, "quotient": Combination.QUOTIENT,
            "compose": Combination.COMPOSITION, "power": Combination.POWER}[tree.kind]
    if tree.kind == "power":
        mc = combine_model_classes(kind, mcs, tree.exponent)
    else:
        mc = combine_model_classes(kind, mcs)
    inputs = BoundInputs(parts, child_db)
    bounds, failures = {}, {}
    for level, loc in PAIRS:
        if level is DerivativeLevel.HESSIAN and mc.reference.smoothness < 2:
            continue
        try:
            bounds[(level, loc)] = _calculus(tree.kind, tree.exponent, level, loc, inputs)
        except (ModelCalcError, ValueError, KeyError) as exc:
            failures[(level, loc)] = exc
    if tree is ctx.cfg.tree and ctx.cfg.zero_factors:
        zeros = [z - 1 for z in ctx.cfg.zero_factors]
        for level in (DerivativeLevel.FUNCTION, DerivativeLevel.GRADIENT):
            try:
                bounds[(level, Locality.AT)] = zero_factor_refinement(inputs, zeros, level, Locality.AT)
                failures.pop((level, Locality.AT), None)
            except (ModelCalcError, ValueError, KeyError) as exc:
                bounds.pop((level, Locality.AT), None)
                failures[(level, Locality.AT)] = exc
    node_db = min([child_db] + [b.delta_bar for b in bounds.values()])
    return _finish(ctx, mc, bounds, failures, node_db, base, radius, model_radius)


# ---------------------------------------------------------------------------
# Checks
# ---------------------------------------------------------------------------

def _order_ok(expected: Order, est: OrderEstimate) -> tuple[bool, str]:
    if expected.is_infinite:
        return est.exact, "" if est.exact else f"expected an exact model, measured slope {est.slope!r}"
    if est.exact:
        return True, ""
    lo, hi = expected.value + SLOPE_WINDOW[0], expected.value + SLOPE_WINDOW[1]
    ok = lo <= est.slope <= hi
    return ok, "" if ok else f"slope {est.slope!r} outside [{lo!r}, {hi!r}]"


def _run_check(cfg, node: _Node, check) -> CheckResult:
    key = (check.level, check.locality)
    bound = node.bounds.get(key)
    deltas = tuple(d for d in cfg.grid.deltas() if d <= node.delta_bar)
    series = None
    if len(deltas) >= 4:
        series = measure_errors(node.mc, node.mc.reference, check.level, check.locality,
                                DeltaGrid(deltas), cfg.base_point, seed=cfg.seed)

    def result(status, diagnostic="", estimate=None, verdict=None):
        s = series if series is None or bound is None else series.with_bound(bound)
        return CheckResult(check.level, check.locality, status, check.expect, check.expected_order,
                           bound, s, estimate, verdict, diagnostic, node.rule)

    if bound is None:
        exc = node.failures.get(key)
        if isinstance(exc, (PreconditionError, DivisionDomainError)):
            return result("PRECONDITION_FAILED", str(exc))
        why = f"{type(exc).__name__}: {exc}" if exc is not None else "no bound for this level"
        return result("FAIL", f"bound unavailable ({why})")
    if series is None:
        return result("FAIL", f"fewer than 4 grid radii within delta_bar {node.delta_bar!r}")
    if series.divergent:
        return result("DIVERGENT", "model evaluation diverged on the grid")
    verdict = check_bound(series, bound)
    estimate, order_diag = None, ""
    try:
        estimate = estimate_order(series)
    except EstimationError as exc:
        order_diag = str(exc)
    if not verdict.passed:
        return result("FAIL", verdict.diagnostic, estimate, verdict)
    if check.expected_order is not None:
        if estimate is None:
            return result("FAIL", order_diag, estimate, verdict)
        ok, diag = _order_ok(check.expected_order, estimate)
        if not ok:
            return result("FAIL", diag, estimate, verdict)
    return result("PASS", "", estimate, verdict)


def run_experiment(cfg: ExperimentConfig) -> ExperimentResult:
    """Build leaf classes, fold the tree through the calculus and verify every check."""
    grid = cfg.grid.deltas()
    ctx = _Ctx(cfg, tuple(sorted({d for d in grid if d <= cfg.delta_bar} | {cfg.delta_bar})))
    root = _evaluate(cfg.tree, cfg.base_point, cfg.delta_bar, ctx)
    root.rule = _rule(cfg.tree)
    checks = tuple(_run_check(cfg, root, c) for c in cfg.checks)
    return ExperimentResult(cfg, checks, root.bounds, root.failures, root.delta_bar)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _num(x):
    if x is None:
        return None
    x = float(x)
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if math.isnan(x):
        return "nan"
    return x


def _csv_num(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return "inf" if x == math.inf else repr(x)


def _bound_json(b: CombinedBound | None):
    if b is None:
        return None
    return {
        "tag": b.tag,
        "order": str(b.order),
        "constant": _num(b.constant),
        "delta_bar": _num(b.delta_bar),
        "flags": sorted(b.flags),
        "trace": [{"tag": t.tag, "description": t.description, "value": _num(t.value)} for t in b.trace],
    }


def _check_json(c: CheckResult):
    est = c.estimate
    return {
        "level": c.level.value,
        "locality": c.locality.value,
        "status": c.status,
        "expect": c.expect,
        "ok": c.ok,
        "tag": c.tag,
        "expected_order": None if c.expected_order is None else str(c.expected_order),
        "bound": _bound_json(c.bound),
        "slope": None if est is None else _num(est.slope),
        "r_squared": None if est is None else _num(est.r_squared),
        "exact": None if est is None else est.exact,
        "worst_ratio": None if c.verdict is None else _num(c.verdict.worst_ratio),
        "diagnostic": c.diagnostic,
    }


def summary_dict(result: ExperimentResult) -> dict:
    return {
        "name": result.config.name,
        "exit_status": result.exit_status,
        "delta_bar": _num(result.delta_bar),
        "seed": result.config.seed,
        "checks": [_check_json(c) for c in result.checks],
        "bounds": {
            f"{lv.value}.{loc.value}": _bound_json(b) for (lv, loc), b in sorted(
                result.bounds.items(), key=lambda kv: (kv[0][0].value, kv[0][1].value))
        },
        "failures": {
            f"{lv.value}.{loc.value}": f"{type(e).__name__}: {e}" for (lv, loc), e in result.failures.items()
        },
    }


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def series_csv(c: CheckResult) -> str:
    rows = ["delta,measured_error,bound_value,ok"]
    for p in c.series.points if c.series is not None else ():
        b = None if c.bound is None else c.bound.bound(p.delta)
        ok = "" if b is None else ("true" if (not p.divergent and p.error <= b * (1 + BOUND_RTOL)) else "false")
        rows.append(f"{_csv_num(p.delta)},{_csv_num(p.error)},{_csv_num(b)},{ok}")
    return "\n".join(rows) + "\n"


def write_json(path: Path, obj) -> None:
    _atomic_write(path, json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def emit_reports(result: ExperimentResult, out_dir) -> int:
    """Write one CSV per check and ``<name>.summary.json``; return the exit status."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = result.config.name
    for c in result.checks:
        _atomic_write(out / f"{name}.{c.level.value}.{c.locality.value}.csv", series_csv(c))
    write_json(out / f"{name}.summary.json", summary_dict(result))
    return result.exit_status
