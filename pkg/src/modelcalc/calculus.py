"""Combined accuracy certificates for products, powers, quotients and compositions.

Each ``*_bound`` function returns a :class:`~modelcalc.core.CombinedBound`
whose order follows the min rule of the combination and whose constant
is the sum of explicitly traced terms.  Every term has the form
``coefficient * kappa * delta_bar**(order - N_F)``, where the coefficient is
a product of uniform bounds taken from :class:`BoundInputs`.

NEAR gradient and Hessian constants are assembled from the triangle
inequalities used to prove the corresponding order statements; such bounds
carry the ``PROOF_DERIVED`` flag.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

from .core import (
    INFINITY,
    LEVEL_QUANTITY,
    AccuracyCertificate,
    Ball,
    CombinedBound,
    CompositionError,
    DerivativeLevel,
    DivisionDomainError,
    EstimationError,
    IncompleteInputsError,
    Locality,
    Order,
    PreconditionError,
    Provenance,
    Quantity,
    Side,
    TraceTerm,
    UniformBound,
    bound_from_certificate,
    bound_symbol,
    min_order,
    point_key,
    scaled_kappa,
)

PROOF_DERIVED = "PROOF_DERIVED"
HEURISTIC = "HEURISTIC"
SAMPLED = "SAMPLED"

EXACT_ENUMERATION_LIMIT = 8

F, G, H = DerivativeLevel.FUNCTION, DerivativeLevel.GRADIENT, DerivativeLevel.HESSIAN
AT, NEAR = Locality.AT, Locality.NEAR


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PartInputs:
    """Certificates and uniform bounds describing one sub-model.

    Parameters
    ----------
    certificates : sequence of AccuracyCertificate
        At most one per (level, locality).
    bounds : sequence of UniformBound
        Truth-side bounds (``Side.TRUTH``) and optional explicit model-side
        bounds (``Side.MODEL``).  AT bounds hold the exact value at the base
        point, e.g. ``ABS_F``/``AT`` is ``|f(x0)|``.
    value : array_like, optional
        ``f(x0)``; required for the inner part of a composition.
    label : str
        Name used in the trace.
    """

    certificates: tuple[AccuracyCertificate, ...] = ()
    bounds: tuple[UniformBound, ...] = ()
    value: tuple[float, ...] | None = None
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "certificates", tuple(self.certificates))
        object.__setattr__(self, "bounds", tuple(self.bounds))
        if self.value is not None:
            object.__setattr__(self, "value", point_key(self.value))
        seen = set()
        for c in self.certificates:
            key = (c.level, c.locality)
            if key in seen:
                raise ValueError(f"duplicate {c.level.value}/{c.locality.value} certificate")
            seen.add(key)
        seen = set()
        for b in self.bounds:
            key = (b.quantity, b.locality, b.side)
            if key in seen:
                raise ValueError(f"duplicate bound {b.symbol}/{b.locality.value}")
            seen.add(key)

    @property
    def base(self) -> tuple[float, ...] | None:
        bases = {c.base for c in self.certificates} | {b.base for b in self.bounds}
        if len(bases) > 1:
            raise CompositionError(f"part {self.label or '?'} mixes base points")
        return bases.pop() if bases else None


@dataclass(frozen=True)
class BoundInputs:
    """Inputs of one combination rule: one :class:`PartInputs` per sub-model."""

    parts: tuple[PartInputs, ...]
    delta_bar: float

    def __post_init__(self):
        object.__setattr__(self, "parts", tuple(self.parts))
        db = float(self.delta_bar)
        if not (math.isfinite(db) and db > 0):
            raise ValueError("delta_bar must be positive")
        object.__setattr__(self, "delta_bar", db)
        for i, p in enumerate(self.parts):
            for item in p.certificates + p.bounds:
                if item.delta_bar < db:
                    raise ValueError(
                        f"part {i + 1}: input valid only up to {item.delta_bar!r} < delta_bar {db!r}"
                    )

    @property
    def n(self) -> int:
        return len(self.parts)

    def with_delta_bar(self, delta_bar: float) -> "BoundInputs":
        return replace(self, delta_bar=delta_bar)

    def cert(self, i: int, level: DerivativeLevel, locality: Locality) -> AccuracyCertificate:
        for c in self.parts[i].certificates:
            if c.level is level and c.locality is locality:
                return c
        raise IncompleteInputsError(f"kappa_{level.value}[{i + 1}]@{locality.value}")

    def _bound(self, i, quantity, locality, side):
        for b in self.parts[i].bounds:
            if b.quantity is quantity and b.locality is locality and b.side is side:
                return b
        return None

    def truth(self, i: int, quantity: Quantity, locality: Locality) -> UniformBound:
        b = self._bound(i, quantity, locality, Side.TRUTH)
        if b is None:
            raise IncompleteInputsError(f"{bound_symbol(quantity, Side.TRUTH)}[{i + 1}]@{locality.value}")
        return b

    def model(self, i: int, quantity: Quantity, locality: Locality) -> UniformBound:
        """Explicit model-side bound if supplied, else derived from the certificate."""
        b = self._bound(i, quantity, locality, Side.MODEL)
        if b is not None:
            return b
        level = {v: k for k, v in LEVEL_QUANTITY.items()}.get(quantity)
        if level is None:
            raise IncompleteInputsError(f"{bound_symbol(quantity, Side.MODEL)}[{i + 1}]@{locality.value}")
        return bound_from_certificate(self.cert(i, level, locality), self.truth(i, quantity, locality))


class _Reader:
    """Float-valued view of :class:`BoundInputs` that records sampled provenance."""

    def __init__(self, inputs: BoundInputs):
        self.inputs = inputs
        self.sampled = False

    def _note(self, b: UniformBound) -> float:
        if b.provenance is Provenance.SAMPLED:
            self.sampled = True
        return b.value

    def cert(self, i, level, loc) -> AccuracyCertificate:
        return self.inputs.cert(i, level, loc)

    def truth(self, i, q, loc) -> float:
        return self._note(self.inputs.truth(i, q, loc))

    def model(self, i, q, loc) -> float:
        b = self.inputs.model(i, q, loc)
        if b.provenance is Provenance.DERIVED_FROM_CERTIFICATE:
            self._note(self.inputs.truth(i, q, loc))
        return self._note(b)


@dataclass(frozen=True)
class _Raw:
    description: str
    coefficient: float
    kappa: float
    order: Order


def _fold(raws: Iterable[_Raw], target: Order, delta_bar: float, tag: str) -> list[TraceTerm]:
    terms = []
    for r in raws:
        if r.kappa == 0.0 or r.coefficient == 0.0:
            value = 0.0
        else:
            value = r.coefficient * scaled_kappa(r.kappa, delta_bar, r.order, target)
        terms.append(TraceTerm(tag, r.description, float(value)))
    return terms


def _subtotal(raws, target, delta_bar) -> float:
    return math.fsum(t.value for t in _fold(raws, target, delta_bar, ""))


def _result(level, locality, order, terms, reader: _Reader, delta_bar, base, flags=()) -> CombinedBound:
    if not terms:
        terms = [TraceTerm("empty", "no contributing term", 0.0)]
    flags = set(flags)
    if reader.sampled:
        flags.add(SAMPLED)
    if locality is NEAR and level is not F:
        flags.add(PROOF_DERIVED)
    constant = math.fsum(t.value for t in terms) if not order.is_infinite else 0.0
    return CombinedBound(level, locality, order, constant, tuple(terms), delta_bar, base, frozenset(flags))


def _common_base(inputs: BoundInputs, parts: Sequence[int] | None = None) -> tuple[float, ...]:
    idx = range(inputs.n) if parts is None else parts
    bases = {inputs.parts[i].base for i in idx} - {None}
    if len(bases) > 1:
        raise CompositionError("sub-model inputs refer to different base points")
    if not bases:
        raise IncompleteInputsError("base point")
    return bases.pop()


def _require_exact_function_at(reader: _Reader, parts: Iterable[int], what: str):
    for i in parts:
        c = reader.cert(i, F, AT)
        if not c.is_exact:
            raise PreconditionError(
                f"{what} requires order-infinity function accuracy at the base point for part {i + 1}, "
                f"got order {c.order} with kappa {c.kappa!r}"
            )


def _orders(reader, parts, levels, loc) -> Order:
    return min_order(reader.cert(i, lvl, loc).order for i in parts for lvl in levels)


def _ck(reader, i, level, loc):
    c = reader.cert(i, level, loc)
    return c.kappa, c.order


def _level_name(level, loc):
    return f"{level.value}-{loc.value}"


# ---------------------------------------------------------------------------
# Product of two functions
# ---------------------------------------------------------------------------

def product2_bound(level: DerivativeLevel, locality: Locality, inputs: BoundInputs) -> CombinedBound:
    """Accuracy of ``f1 * f2`` from the accuracy of its two factors.

    FUNCTION takes the smaller of the two orderings; AT gradient and Hessian
    need both factors to interpolate at ``x0``.
    """
    level, locality = DerivativeLevel(level), Locality(locality)
    if inputs.n != 2:
        raise ValueError("product2_bound needs exactly two parts")
    r = _Reader(inputs)
    base = _common_base(inputs)
    db = inputs.delta_bar
    tag = f"product2/{_level_name(level, locality)}"
    loc = locality
    (k1f, n1f), (k2f, n2f) = _ck(r, 0, F, loc), _ck(r, 1, F, loc)

    if level is F:
        order = min_order([n1f, n2f])
        m1, m2 = r.truth(0, Quantity.ABS_F, loc), r.truth(1, Quantity.ABS_F, loc)
        mt1, mt2 = r.model(0, Quantity.ABS_F, loc), r.model(1, Quantity.ABS_F, loc)
        cand_a = [_Raw("M_model_f[2] kappa_f[1]", mt2, k1f, n1f), _Raw("M_f[1] kappa_f[2]", m1, k2f, n2f)]
        cand_b = [_Raw("M_f[2] kappa_f[1]", m2, k1f, n1f), _Raw("M_model_f[1] kappa_f[2]", mt1, k2f, n2f)]
        a, b = _subtotal(cand_a, order, db), _subtotal(cand_b, order, db)
        terms = _fold(cand_a if a <= b else cand_b, order, db, tag)
        return _result(level, loc, order, terms, r, db, base)

    if loc is AT:
        _require_exact_function_at(r, (0, 1), "product gradient/Hessian bound at x0")
        (k1g, n1g), (k2g, n2g) = _ck(r, 0, G, AT), _ck(r, 1, G, AT)
        f1, f2 = r.truth(0, Quantity.ABS_F, AT), r.truth(1, Quantity.ABS_F, AT)
        if level is G:
            order = min_order([n1g, n2g])
            raws = [_Raw("|f2(x0)| kappa_g[1]", f2, k1g, n1g), _Raw("|f1(x0)| kappa_g[2]", f1, k2g, n2g)]
            return _result(level, loc, order, _fold(raws, order, db, tag), r, db, base)
        (k1h, n1h), (k2h, n2h) = _ck(r, 0, H, AT), _ck(r, 1, H, AT)
        order = min_order([n1g, n2g, n1h, n2h])
        g1, g2 = r.truth(0, Quantity.NORM_GRAD, AT), r.truth(1, Quantity.NORM_GRAD, AT)
        gt1, gt2 = r.model(0, Quantity.NORM_GRAD, AT), r.model(1, Quantity.NORM_GRAD, AT)
        raws = [
            _Raw("(M_grad_f[2] + M_model_grad_f[2]) kappa_g[1]", g2 + gt2, k1g, n1g),
            _Raw("(M_grad_f[1] + M_model_grad_f[1]) kappa_g[2]", g1 + gt1, k2g, n2g),
            _Raw("|f2(x0)| kappa_h[1]", f2, k1h, n1h),
            _Raw("|f1(x0)| kappa_h[2]", f1, k2h, n2h),
        ]
        return _result(level, loc, order, _fold(raws, order, db, tag), r, db, base)

    # NEAR gradient / Hessian
    (k1g, n1g), (k2g, n2g) = _ck(r, 0, G, NEAR), _ck(r, 1, G, NEAR)
    m1, m2 = r.truth(0, Quantity.ABS_F, NEAR), r.truth(1, Quantity.ABS_F, NEAR)
    gt1, gt2 = r.model(0, Quantity.NORM_GRAD, NEAR), r.model(1, Quantity.NORM_GRAD, NEAR)
    if level is G:
        order = min_order([n1f, n2f, n1g, n2g])
        raws = [
            _Raw("M_model_grad_f[2] kappa_f[1]", gt2, k1f, n1f),
            _Raw("M_model_grad_f[1] kappa_f[2]", gt1, k2f, n2f),
            _Raw("M_f[2] kappa_g[1]", m2, k1g, n1g),
            _Raw("M_f[1] kappa_g[2]", m1, k2g, n2g),
        ]
        return _result(level, loc, order, _fold(raws, order, db, tag), r, db, base)
    (k1h, n1h), (k2h, n2h) = _ck(r, 0, H, NEAR), _ck(r, 1, H, NEAR)
    order = min_order([n1f, n2f, n1g, n2g, n1h, n2h])
    g1, g2 = r.truth(0, Quantity.NORM_GRAD, NEAR), r.truth(1, Quantity.NORM_GRAD, NEAR)
    ht1, ht2 = r.model(0, Quantity.NORM_HESS, NEAR), r.model(1, Quantity.NORM_HESS, NEAR)
    raws = [
        _Raw("M_model_hess_f[2] kappa_f[1]", ht2, k1f, n1f),
        _Raw("M_model_hess_f[1] kappa_f[2]", ht1, k2f, n2f),
        _Raw("(M_grad_f[2] + M_model_grad_f[2]) kappa_g[1]", g2 + gt2, k1g, n1g),
        _Raw("(M_grad_f[1] + M_model_grad_f[1]) kappa_g[2]", g1 + gt1, k2g, n2g),
        _Raw("M_f[2] kappa_h[1]", m2, k1h, n1h),
        _Raw("M_f[1] kappa_h[2]", m1, k2h, n2h),
    ]
    return _result(level, loc, order, _fold(raws, order, db, tag), r, db, base)


# ---------------------------------------------------------------------------
# Product of n functions
# ---------------------------------------------------------------------------

def _ordering_raws(sigma, m, mt, kappa, order) -> list[_Raw]:
    """Terms of one ordering: truth bounds before position i, model bounds after."""
    raws = []
    for pos, i in enumerate(sigma):
        coef = math.prod(m[j] for j in sigma[:pos]) * math.prod(mt[k] for k in sigma[pos + 1:])
        raws.append(_Raw(f"ordering {tuple(s + 1 for s in sigma)}: position {pos + 1} kappa_f[{i + 1}]", coef, kappa[i], order[i]))
    return raws


def _candidate_orderings(idx: Sequence[int], kappa, order, delta_bar, exact: bool):
    if exact:
        return itertools.permutations(idx)
    greedy = sorted(idx, key=lambda i: (0.0 if kappa[i] == 0.0 else kappa[i] * delta_bar ** order[i].value, i))
    return [tuple(idx), tuple(reversed(idx)), tuple(greedy)]


def _function_min(idx, m, mt, kappa, order, target, delta_bar, limit=EXACT_ENUMERATION_LIMIT):
    """``(value, raws, heuristic)`` of the ordering minimum over the sub-product ``idx``."""
    idx = tuple(idx)
    exact = len(idx) <= limit
    best = None
    for sigma in _candidate_orderings(idx, kappa, order, delta_bar, exact):
        raws = _ordering_raws(sigma, m, mt, kappa, order)
        total = _subtotal(raws, target, delta_bar)
        if best is None or total < best[0]:
            best = (total, raws)
    return best[0], best[1], not exact


def productN_bound(
    level: DerivativeLevel,
    locality: Locality,
    inputs: BoundInputs,
    n: int | None = None,
    *,
    suppress_heuristic_flag: bool = False,
) -> CombinedBound:
    """Accuracy of ``f1 * ... * fn``.

    FUNCTION minimizes over orderings of the factors; the minimum is exact
    for ``n <= 8``, otherwise only the identity, reversed and greedy
    (ascending ``kappa_i * delta_bar**N_i``) orderings are tried and the
    result is flagged ``HEURISTIC``.  NEAR gradient and Hessian constants
    recurse on the sub-products ``F_i = prod_{j != i} f_j``.
    """
    level, locality = DerivativeLevel(level), Locality(locality)
    n = inputs.n if n is None else int(n)
    if n < 2:
        raise ValueError("productN_bound needs n >= 2")
    if n != inputs.n:
        raise ValueError(f"n={n} but {inputs.n} parts supplied")
    r = _Reader(inputs)
    base = _common_base(inputs)
    db = inputs.delta_bar
    tag = f"product{n}/{_level_name(level, locality)}"
    loc = locality
    idx = tuple(range(n))
    flags = set()
    heuristic = n > EXACT_ENUMERATION_LIMIT and not suppress_heuristic_flag

    if level is F:
        kf = [r.cert(i, F, loc).kappa for i in idx]
        nf = [r.cert(i, F, loc).order for i in idx]
        order = min_order(nf)
        m = [r.truth(i, Quantity.ABS_F, loc) for i in idx]
        mt = [r.model(i, Quantity.ABS_F, loc) for i in idx]
        _, raws, _ = _function_min(idx, m, mt, kf, nf, order, db)
        if heuristic:
            flags.add(HEURISTIC)
        return _result(level, loc, order, _fold(raws, order, db, tag), r, db, base, flags)

    if loc is AT:
        _require_exact_function_at(r, idx, "product gradient/Hessian bound at x0")
        fv = [r.truth(i, Quantity.ABS_F, AT) for i in idx]
        kg = [r.cert(i, G, AT).kappa for i in idx]
        ng = [r.cert(i, G, AT).order for i in idx]

        def others(excl):
            return math.prod(fv[k] for k in idx if k not in excl)

        if level is G:
            order = min_order(ng)
            raws = [_Raw(f"prod_(j!={i + 1}) |f_j(x0)| kappa_g[{i + 1}]", others({i}), kg[i], ng[i]) for i in idx]
            return _result(level, loc, order, _fold(raws, order, db, tag), r, db, base)
        kh = [r.cert(i, H, AT).kappa for i in idx]
        nh = [r.cert(i, H, AT).order for i in idx]
        order = min_order(ng + nh)
        g = [r.truth(i, Quantity.NORM_GRAD, AT) for i in idx]
        gt = [r.model(i, Quantity.NORM_GRAD, AT) for i in idx]
        raws = []
        for i in idx:
            coef = math.fsum(others({i, j}) * (g[j] + gt[j]) for j in idx if j != i)
            raws.append(_Raw(f"sum_(j!={i + 1}) prod_(k!={i + 1},j) |f_k(x0)| (M_grad_f[j] + M_model_grad_f[j]) kappa_g[{i + 1}]", coef, kg[i], ng[i]))
        for i in idx:
            raws.append(_Raw(f"|F_{i + 1}(x0)| kappa_h[{i + 1}]", others({i}), kh[i], nh[i]))
        return _result(level, loc, order, _fold(raws, order, db, tag), r, db, base)

    # NEAR gradient / Hessian via the recursion on F_i.
    kf = [r.cert(i, F, NEAR).kappa for i in idx]
    nf = [r.cert(i, F, NEAR).order for i in idx]
    kg = [r.cert(i, G, NEAR).kappa for i in idx]
    ng = [r.cert(i, G, NEAR).order for i in idx]
    m = [r.truth(i, Quantity.ABS_F, NEAR) for i in idx]
    mt = [r.model(i, Quantity.ABS_F, NEAR) for i in idx]
    g = [r.truth(i, Quantity.NORM_GRAD, NEAR) for i in idx]
    gt = [r.model(i, Quantity.NORM_GRAD, NEAR) for i in idx]
    if level is G:
        order = min_order(nf + ng)
    else:
        kh = [r.cert(i, H, NEAR).kappa for i in idx]
        nh = [r.cert(i, H, NEAR).order for i in idx]
        order = min_order(nf + ng + nh)
        ht = [r.model(i, Quantity.NORM_HESS, NEAR) for i in idx]
    if order.is_infinite:
        return _result(level, loc, order, [TraceTerm(tag, "all factors exact", 0.0)], r, db, base)

    used_heuristic = False
    fmemo: dict = {}
    gmemo: dict = {}

    def e_f(sub):
        nonlocal used_heuristic
        if sub not in fmemo:
            if len(sub) == 1:
                (j,) = sub
                fmemo[sub] = _subtotal([_Raw("", 1.0, kf[j], nf[j])], order, db)
            else:
                val, _, h = _function_min(sub, m, mt, kf, nf, order, db)
                used_heuristic |= h
                fmemo[sub] = val
        return fmemo[sub]

    def grad_raws(sub):
        out = []
        for i in sub:
            rest = tuple(j for j in sub if j != i)
            out.append(_Raw(f"M_model_grad_f[{i + 1}] E_f(F without {i + 1})", gt[i], e_f(rest), order))
            out.append(_Raw(f"prod_(j!={i + 1}) M_f[j] kappa_g[{i + 1}]", math.prod(m[j] for j in rest), kg[i], ng[i]))
        return out

    def e_g(sub):
        if sub not in gmemo:
            if len(sub) == 1:
                (j,) = sub
                gmemo[sub] = _subtotal([_Raw("", 1.0, kg[j], ng[j])], order, db)
            else:
                gmemo[sub] = _subtotal(grad_raws(sub), order, db)
        return gmemo[sub]

    if level is G:
        raws = grad_raws(idx)
    else:
        raws = []
        for i in idx:
            rest = tuple(j for j in idx if j != i)
            m_rest = math.prod(m[j] for j in rest)
            m_grad_rest = math.fsum(
                g[j] * math.prod(m[k] for k in rest if k != j) for j in rest
            )
            raws += [
                _Raw(f"M_F{i + 1} kappa_h[{i + 1}]", m_rest, kh[i], nh[i]),
                _Raw(f"M_model_hess_f[{i + 1}] E_f(F without {i + 1})", ht[i], e_f(rest), order),
                _Raw(f"M_grad_F{i + 1} kappa_g[{i + 1}]", m_grad_rest, kg[i], ng[i]),
                _Raw(f"M_model_grad_f[{i + 1}] E_g(F without {i + 1})", gt[i], e_g(rest), order),
            ]
    if used_heuristic and not suppress_heuristic_flag:
        flags.add(HEURISTIC)
    return _result(level, loc, order, _fold(raws, order, db, tag), r, db, base, flags)


# ---------------------------------------------------------------------------
# Power of one function
# ---------------------------------------------------------------------------

def power_bound(
    level: DerivativeLevel,
    inputs: BoundInputs,
    n: int,
    locality: Locality = Locality.AT,
) -> CombinedBound:
    """Accuracy of ``f**n`` (closed forms of the product bounds with identical factors)."""
    level, locality = DerivativeLevel(level), Locality(locality)
    if int(n) != n or n < 1:
        raise ValueError("power_bound needs an integer exponent n >= 1")
    n = int(n)
    if inputs.n != 1:
        raise ValueError("power_bound takes a single part")
    if locality is NEAR and level is not F:
        if n == 1:
            return _power_identity(level, locality, inputs)
        replicated = BoundInputs(inputs.parts * n, inputs.delta_bar)
        b = productN_bound(level, locality, replicated, n)
        terms = tuple(TraceTerm(f"power{n}/{_level_name(level, locality)}", t.description, t.value) for t in b.trace)
        return replace(b, trace=terms)
    r = _Reader(inputs)
    base = _common_base(inputs)
    db = inputs.delta_bar
    tag = f"power{n}/{_level_name(level, locality)}"
    if level is F:
        k, order = _ck(r, 0, F, locality)
        mf, mt = r.truth(0, Quantity.ABS_F, locality), r.model(0, Quantity.ABS_F, locality)
        coef = math.fsum(mf ** (i - 1) * mt ** (n - i) for i in range(1, n + 1))
        raws = [_Raw("sum_i M_f^(i-1) M_model_f^(n-i) kappa_f", coef, k, order)]
        return _result(level, locality, order, _fold(raws, order, db, tag), r, db, base)
    _require_exact_function_at(r, (0,), "power gradient/Hessian bound at x0")
    fv = r.truth(0, Quantity.ABS_F, AT)
    kg, ng = _ck(r, 0, G, AT)
    if level is G:
        raws = [_Raw("n |f(x0)|^(n-1) kappa_g", n * fv ** (n - 1), kg, ng)]
        return _result(level, locality, ng, _fold(raws, ng, db, tag), r, db, base)
    kh, nh = _ck(r, 0, H, AT)
    order = min_order([ng, nh])
    if n >= 2:
        g, gt = r.truth(0, Quantity.NORM_GRAD, AT), r.model(0, Quantity.NORM_GRAD, AT)
        cg = n * (n - 1) * fv ** (n - 2) * (g + gt)
    else:
        cg = 0.0
    raws = [
        _Raw("n(n-1) |f(x0)|^(n-2) (M_grad_f + M_model_grad_f) kappa_g", cg, kg, ng),
        _Raw("n |f(x0)|^(n-1) kappa_h", n * fv ** (n - 1), kh, nh),
    ]
    return _result(level, locality, order, _fold(raws, order, db, tag), r, db, base)


def _power_identity(level, locality, inputs):
    r = _Reader(inputs)
    k, order = _ck(r, 0, level, locality)
    tag = f"power1/{_level_name(level, locality)}"
    terms = _fold([_Raw(f"kappa_{level.value}", 1.0, k, order)], order, inputs.delta_bar, tag)
    return _result(level, locality, order, terms, r, inputs.delta_bar, _common_base(inputs))


# ---------------------------------------------------------------------------
# Quotient
# ---------------------------------------------------------------------------

MAX_HALVINGS = 64


def reciprocal_uniform_bound(
    m_recip: UniformBound,
    cert2: AccuracyCertificate,
    delta_bar: float | None = None,
) -> tuple[UniformBound, float]:
    """Uniform bound on ``1/f~2`` and the (possibly halved) radius cap it needs.

    ``M~ = M / (1 - delta_bar**N * M * kappa)``; ``delta_bar`` is halved until
    the denominator is at least 1/2, so ``M~ <= 2 M``.
    """
    if cert2.level is not F:
        raise ValueError("reciprocal bound needs the denominator's function certificate")
    if m_recip.quantity is not Quantity.ABS_RECIP:
        raise ValueError("reciprocal bound needs an ABS_RECIP bound on the true denominator")
    if not cert2.order.is_infinite and cert2.order.value == 0:
        raise PreconditionError("reciprocal bound requires denominator function order > 0")
    db = min(m_recip.delta_bar, cert2.delta_bar) if delta_bar is None else float(delta_bar)
    M, kappa = m_recip.value, cert2.kappa
    if not (math.isfinite(M) and math.isfinite(kappa) and math.isfinite(db)):
        raise EstimationError("reciprocal bound inputs are not finite")
    if kappa == 0.0 or M == 0.0:
        denom = 1.0
    else:
        N = cert2.order.value
        denom = 1.0 - db ** N * M * kappa
        halvings = 0
        while denom < 0.5:
            if halvings == MAX_HALVINGS:
                raise EstimationError(f"reciprocal bound: denominator still {denom!r} after {MAX_HALVINGS} halvings")
            db *= 0.5
            halvings += 1
            denom = 1.0 - db ** N * M * kappa
    bound = UniformBound(
        Quantity.ABS_RECIP,
        M / denom,
        m_recip.locality,
        m_recip.base,
        db,
        provenance=Provenance.DERIVED_FROM_CERTIFICATE,
        side=Side.MODEL,
    )
    return bound, db


def _recip_value(r: _Reader, loc) -> float:
    """``M_{1/f2}`` at ``loc``; at the base point it is ``1/|f2(x0)|`` when not supplied."""
    inputs = r.inputs
    b = inputs._bound(1, Quantity.ABS_RECIP, loc, Side.TRUTH)
    if b is not None:
        return r._note(b)
    if loc is AT:
        return 1.0 / r.truth(1, Quantity.ABS_F, AT)
    raise IncompleteInputsError(f"{bound_symbol(Quantity.ABS_RECIP, Side.TRUTH)}[2]@{loc.value}")


def _check_denominator_nonzero(inputs: BoundInputs):
    b = inputs._bound(1, Quantity.ABS_F, AT, Side.TRUTH)
    if b is not None and b.value == 0.0:
        raise DivisionDomainError("quotient bound: denominator vanishes at the base point")


def quotient_bound(level: DerivativeLevel, locality: Locality, inputs: BoundInputs) -> CombinedBound:
    """Accuracy of ``f1 / f2``; the denominator model must have function order > 0.

    The returned ``delta_bar`` is the radius cap after the reciprocal bound's
    halving step.
    """
    level, locality = DerivativeLevel(level), Locality(locality)
    if inputs.n != 2:
        raise ValueError("quotient_bound needs exactly [numerator, denominator]")
    _check_denominator_nonzero(inputs)
    base = _common_base(inputs)
    loc = locality
    tag = f"quotient/{_level_name(level, locality)}"
    probe = _Reader(inputs)
    c2 = probe.cert(1, F, loc)
    if not c2.order.is_infinite and c2.order.value == 0:
        raise PreconditionError(
            "quotient bound requires denominator function order > 0 (order-0 denominators can make the error unbounded)"
        )

    if level is not F and loc is AT:
        r = _Reader(inputs)
        db = inputs.delta_bar
        _require_exact_function_at(r, (0, 1), "quotient gradient/Hessian bound at x0")
        f1 = r.truth(0, Quantity.ABS_F, AT)
        f2 = r.truth(1, Quantity.ABS_F, AT)
        (k1g, n1g), (k2g, n2g) = _ck(r, 0, G, AT), _ck(r, 1, G, AT)
        if level is G:
            order = min_order([n1g, n2g])
            raws = [_Raw("|1/f2(x0)| kappa_g[1]", 1.0 / f2, k1g, n1g), _Raw("|f1(x0)/f2(x0)^2| kappa_g[2]", f1 / f2**2, k2g, n2g)]
            return _result(level, loc, order, _fold(raws, order, db, tag), r, db, base)
        (k1h, n1h), (k2h, n2h) = _ck(r, 0, H, AT), _ck(r, 1, H, AT)
        order = min_order([n1g, n2g, n1h, n2h])
        g1, g2 = r.truth(0, Quantity.NORM_GRAD, AT), r.truth(1, Quantity.NORM_GRAD, AT)
        gt1, gt2 = r.model(0, Quantity.NORM_GRAD, AT), r.model(1, Quantity.NORM_GRAD, AT)
        raws = [
            _Raw("|1/f2^2| (M_grad_f[2] + M_model_grad_f[2]) kappa_g[1]", (g2 + gt2) / f2**2, k1g, n1g),
            _Raw(
                "(|1/f2^2| (M_grad_f[1] + M_model_grad_f[1]) + |2 f1/f2^3| (M_grad_f[2] + M_model_grad_f[2])) kappa_g[2]",
                (g1 + gt1) / f2**2 + 2.0 * f1 / f2**3 * (g2 + gt2),
                k2g,
                n2g,
            ),
            _Raw("|1/f2| kappa_h[1]", 1.0 / f2, k1h, n1h),
            _Raw("|f1/f2^2| kappa_h[2]", f1 / f2**2, k2h, n2h),
        ]
        return _result(level, loc, order, _fold(raws, order, db, tag), r, db, base)

    mr = _recip_value(probe, loc)
    m_recip = UniformBound(Quantity.ABS_RECIP, mr, loc, base, inputs.delta_bar)
    mtil_bound, db = reciprocal_uniform_bound(m_recip, c2, inputs.delta_bar)
    mtil = mtil_bound.value
    shrunk = inputs.with_delta_bar(db) if db != inputs.delta_bar else inputs
    r = _Reader(shrunk)
    r.sampled = probe.sampled
    trace_extra = [] if db == inputs.delta_bar else [TraceTerm("reciprocal-bound", f"delta_bar halved to {db!r}", 0.0)]
    (k1f, n1f), (k2f, n2f) = _ck(r, 0, F, loc), _ck(r, 1, F, loc)

    if level is F:
        order = min_order([n1f, n2f])
        m1, mt1 = r.truth(0, Quantity.ABS_F, loc), r.model(0, Quantity.ABS_F, loc)
        cand_a = [_Raw("M_recip_f[2] kappa_f[1]", mr, k1f, n1f), _Raw("M_recip_f[2] M_model_recip_f[2] M_model_f[1] kappa_f[2]", mr * mtil * mt1, k2f, n2f)]
        cand_b = [_Raw("M_model_recip_f[2] kappa_f[1]", mtil, k1f, n1f), _Raw("M_recip_f[2] M_model_recip_f[2] M_f[1] kappa_f[2]", mr * mtil * m1, k2f, n2f)]
        a, b = _subtotal(cand_a, order, db), _subtotal(cand_b, order, db)
        terms = _fold(cand_a if a <= b else cand_b, order, db, tag) + trace_extra
        return _result(level, loc, order, terms, r, db, base)

    # NEAR gradient / Hessian
    (k1g, n1g), (k2g, n2g) = _ck(r, 0, G, NEAR), _ck(r, 1, G, NEAR)
    m1 = r.truth(0, Quantity.ABS_F, NEAR)
    m2, mt2 = r.truth(1, Quantity.ABS_F, NEAR), r.model(1, Quantity.ABS_F, NEAR)
    gt1, gt2 = r.model(0, Quantity.NORM_GRAD, NEAR), r.model(1, Quantity.NORM_GRAD, NEAR)
    if level is G:
        order = min_order([n1f, n2f, n1g, n2g])
        raws = [
            _Raw("M_model_grad_f[2] M_model_recip_f[2]^2 kappa_f[1]", gt2 * mtil**2, k1f, n1f),
            _Raw(
                "(M_model_grad_f[2] M_recip^2 M_model_recip^2 M_f[1] (M_f[2] + M_model_f[2]) + M_model_grad_f[1] M_recip M_model_recip) kappa_f[2]",
                gt2 * mr**2 * mtil**2 * m1 * (m2 + mt2) + gt1 * mr * mtil,
                k2f,
                n2f,
            ),
            _Raw("M_recip_f[2] kappa_g[1]", mr, k1g, n1g),
            _Raw("M_f[1] M_recip_f[2]^2 kappa_g[2]", m1 * mr**2, k2g, n2g),
        ]
        return _result(level, loc, order, _fold(raws, order, db, tag) + trace_extra, r, db, base)
    (k1h, n1h), (k2h, n2h) = _ck(r, 0, H, NEAR), _ck(r, 1, H, NEAR)
    order = min_order([n1f, n2f, n1g, n2g, n1h, n2h])
    g2 = r.truth(1, Quantity.NORM_GRAD, NEAR)
    ht1, ht2 = r.model(0, Quantity.NORM_HESS, NEAR), r.model(1, Quantity.NORM_HESS, NEAR)
    rm = mr * mtil
    raws = [
        _Raw("M_recip kappa_h[1]", mr, k1h, n1h),
        _Raw("M_f[1] M_recip^2 kappa_h[2]", m1 * mr**2, k2h, n2h),
        _Raw("2 M_recip^2 M_grad_f[2] kappa_g[1]", 2.0 * mr**2 * g2, k1g, n1g),
        _Raw(
            "(2 M_model_grad_f[1] M_recip^2 + 2 M_f[1] M_recip^3 (M_grad_f[2] + M_model_grad_f[2])) kappa_g[2]",
            2.0 * gt1 * mr**2 + 2.0 * m1 * mr**3 * (g2 + gt2),
            k2g,
            n2g,
        ),
        _Raw(
            "(M_model_hess_f[2] M_model_recip^2 + 2 M_model_grad_f[2]^2 M_model_recip^3) kappa_f[1]",
            ht2 * mtil**2 + 2.0 * gt2**2 * mtil**3,
            k1f,
            n1f,
        ),
        _Raw(
            "M_recip M_model_recip (M_model_hess_f[1] + 2 M_model_grad_f[1] M_model_grad_f[2] (M_recip + M_model_recip)"
            " + M_f[1] M_model_hess_f[2] (M_recip + M_model_recip)"
            " + 2 M_f[1] M_model_grad_f[2]^2 (M_recip^2 + M_recip M_model_recip + M_model_recip^2)) kappa_f[2]",
            rm * (
                ht1
                + 2.0 * gt1 * gt2 * (mr + mtil)
                + m1 * ht2 * (mr + mtil)
                + 2.0 * m1 * gt2**2 * (mr**2 + mr * mtil + mtil**2)
            ),
            k2f,
            n2f,
        ),
    ]
    return _result(level, loc, order, _fold(raws, order, db, tag) + trace_extra, r, db, base)


# ---------------------------------------------------------------------------
# Composition
# ---------------------------------------------------------------------------

def image_gradient_bound(f1, ball: Ball, n_sample: int = 256, seed: int = 0) -> UniformBound:
    """``M_bar = || (max_ball ||grad g_i||)_i ||`` so that ``f1(B_D) ⊆ B_{M_bar D}(f1(x0))``."""
    from .oracles import oracle_sup

    if f1.smoothness < 1:
        raise EstimationError(f"{f1.name} has no gradient; image bound unavailable")
    value = oracle_sup(f1, Quantity.IMAGE_GRAD, ball.sample(n_sample, seed))
    return UniformBound(Quantity.IMAGE_GRAD, value, Locality.NEAR, ball.center, ball.radius, provenance=Provenance.SAMPLED)


def _pow_order(x: float, order: Order) -> float:
    return 1.0 if order.is_infinite else x ** order.value


def composition_bound(level: DerivativeLevel, locality: Locality, inputs: BoundInputs) -> CombinedBound:
    """Accuracy of ``f2 ∘ f1`` with ``parts = [inner f1, outer f2]``.

    The outer part's inputs must be based at ``f1(x0)`` (the inner part's
    ``value``).  Its radius cap must cover the image ball: if it is smaller
    than ``M_bar * delta_bar`` the composite ``delta_bar`` shrinks to
    ``delta_bar2 / M_bar``.  Image-ball factors use ``max(1, M_bar)``.
    """
    level, locality = DerivativeLevel(level), Locality(locality)
    if inputs.n != 2:
        raise ValueError("composition_bound needs exactly [inner, outer]")
    inner, outer = inputs.parts
    base = _common_base(inputs, [0])
    if inner.value is None:
        raise IncompleteInputsError("f1(x0)")
    outer_base = outer.base
    if outer_base is not None and outer_base != inner.value:
        raise CompositionError("outer certificates are not based at f1(x0)")
    loc = locality
    tag = f"composition/{_level_name(level, locality)}"
    probe = _Reader(inputs)
    c1 = probe.cert(0, F, loc)
    if not c1.order.is_infinite and c1.order.value == 0:
        raise PreconditionError(
            "composition bound requires inner function order > 0 (order-0 inner models can make the error unbounded)"
        )

    mbar = probe.truth(0, Quantity.IMAGE_GRAD, NEAR)
    mbar1 = max(1.0, mbar)
    db = inputs.delta_bar
    trace_extra = []
    outer_caps = [item.delta_bar for item in outer.certificates + outer.bounds]
    if outer_caps and mbar > 0.0:
        db2 = min(outer_caps)
        if db2 < mbar * db:
            db = db2 / mbar
            trace_extra.append(TraceTerm("image-radius", f"delta_bar shrunk to delta_bar2/M_bar = {db!r}", 0.0))
    r = _Reader(inputs if db == inputs.delta_bar else inputs.with_delta_bar(db))
    r.sampled = probe.sampled

    (k1f, n1f), (k2f, n2f) = _ck(r, 0, F, loc), _ck(r, 1, F, loc)

    if level is F:
        order = min_order([n1f, n2f])
        gt2 = r.model(1, Quantity.NORM_GRAD, NEAR)
        raws = [
            _Raw("M_model_grad_f[2] kappa_f[1]", gt2, k1f, n1f),
            _Raw(f"max(1, M_bar)^N2f kappa_f[2] (M_bar={mbar!r})", _pow_order(mbar1, n2f), k2f, n2f),
        ]
        return _result(level, loc, order, _fold(raws, order, db, tag) + trace_extra, r, db, base)

    if loc is AT:
        _require_exact_function_at(r, (0, 1), "composition gradient/Hessian bound at x0")
        (k1g, n1g), (k2g, n2g) = _ck(r, 0, G, AT), _ck(r, 1, G, AT)
        grad_f2 = r.truth(1, Quantity.NORM_GRAD, AT)
        jt1 = r.model(0, Quantity.NORM_GRAD, AT)
        if level is G:
            order = min_order([n1g, n2g])
            raws = [
                _Raw("||grad f2(f1(x0))|| kappa_g[1]", grad_f2, k1g, n1g),
                _Raw("M_model_grad_f[1] kappa_g[2]", jt1, k2g, n2g),
            ]
            return _result(level, loc, order, _fold(raws, order, db, tag) + trace_extra, r, db, base)
        (k1h, n1h), (k2h, n2h) = _ck(r, 0, H, AT), _ck(r, 1, H, AT)
        order = min_order([n1g, n2g, n1h, n2h])
        j1 = r.truth(0, Quantity.NORM_GRAD, AT)
        ht1 = r.model(0, Quantity.NORM_HESS, AT)
        ht2 = r.model(1, Quantity.NORM_HESS, AT)
        gt2 = r.model(1, Quantity.NORM_GRAD, AT)
        raws = [
            _Raw("M_model_hess_f[2] (||grad f1(x0)|| + M_model_grad_f[1]) kappa_g[1]", ht2 * (j1 + jt1), k1g, n1g),
            _Raw("M_model_hess_f[1] kappa_g[2]", ht1, k2g, n2g),
            _Raw("(||grad f2(f1(x0))|| + M_model_grad_f[2]) kappa_h[1]", grad_f2 + gt2, k1h, n1h),
            _Raw("||grad f1(x0)||^2 kappa_h[2]", j1**2, k2h, n2h),
        ]
        return _result(level, loc, order, _fold(raws, order, db, tag) + trace_extra, r, db, base)

    (k1g, n1g), (k2g, n2g) = _ck(r, 0, G, NEAR), _ck(r, 1, G, NEAR)
    grad_f2 = r.truth(1, Quantity.NORM_GRAD, NEAR)
    jt1 = r.model(0, Quantity.NORM_GRAD, NEAR)
    ht2 = r.model(1, Quantity.NORM_HESS, NEAR)
    if level is G:
        order = min_order([n1f, n2f, n1g, n2g])
        raws = [
            _Raw("M_grad_f2(f1) kappa_g[1]", grad_f2, k1g, n1g),
            _Raw("M_model_grad_f[1] max(1, M_bar)^N2g kappa_g[2]", jt1 * _pow_order(mbar1, n2g), k2g, n2g),
            _Raw("M_model_grad_f[1] M_model_hess_f[2] kappa_f[1]", jt1 * ht2, k1f, n1f),
        ]
        return _result(level, loc, order, _fold(raws, order, db, tag) + trace_extra, r, db, base)
    (k1h, n1h), (k2h, n2h) = _ck(r, 0, H, NEAR), _ck(r, 1, H, NEAR)
    order = min_order([n1f, n2f, n1g, n2g, n1h, n2h])
    j1 = r.truth(0, Quantity.NORM_GRAD, NEAR)
    ht1 = r.model(0, Quantity.NORM_HESS, NEAR)
    tt2 = r.model(1, Quantity.NORM_THIRD, NEAR)
    raws = [
        _Raw("M_grad_f2(f1) kappa_h[1]", grad_f2, k1h, n1h),
        _Raw("max(1, M_bar)^N2g M_model_hess_f[1] kappa_g[2]", _pow_order(mbar1, n2g) * ht1, k2g, n2g),
        _Raw("(M_model_hess_f[2] M_model_hess_f[1] + M_grad_f[1]^2 M_model_third_f[2]) kappa_f[1]", ht2 * ht1 + j1**2 * tt2, k1f, n1f),
        _Raw("M_grad_f[1]^2 max(1, M_bar)^N2h kappa_h[2]", j1**2 * _pow_order(mbar1, n2h), k2h, n2h),
        _Raw("(M_grad_f[1] + M_model_grad_f[1]) M_model_hess_f[2] kappa_g[1]", (j1 + jt1) * ht2, k1g, n1g),
    ]
    return _result(level, loc, order, _fold(raws, order, db, tag) + trace_extra, r, db, base)


# ---------------------------------------------------------------------------
# Zero factors
# ---------------------------------------------------------------------------

def zero_factor_refinement(
    inputs: BoundInputs,
    zero_indices: Sequence[int],
    level: DerivativeLevel = DerivativeLevel.FUNCTION,
    locality: Locality = Locality.AT,
) -> CombinedBound:
    """Product bound at ``x0`` when the listed factors vanish there.

    The caller asserts ``f_i(x0) = 0`` for each listed index.  FUNCTION
    places a zero factor first in the ordering so only its own term
    survives; GRADIENT keeps only the terms whose other factors are all
    non-zero, which vanish entirely with two distinct zeros.  The result is
    the plain product bound unless the refined order is higher.
    """
    level, locality = DerivativeLevel(level), Locality(locality)
    zeros = sorted(set(int(z) for z in zero_indices))
    if not zeros:
        raise ValueError("zero_factor_refinement needs at least one zero index")
    if locality is not AT or level is H:
        raise ValueError("zero-factor refinement covers function and gradient accuracy at x0 only")
    n = inputs.n
    if any(z < 0 or z >= n for z in zeros):
        raise ValueError(f"zero index out of range for {n} factors")
    for z in zeros:
        b = inputs._bound(z, Quantity.ABS_F, AT, Side.TRUTH)
        if b is not None and b.value != 0.0:
            raise PreconditionError(f"factor {z + 1} is declared zero at x0 but |f(x0)| = {b.value!r}")
    plain = product2_bound(level, AT, inputs) if n == 2 else productN_bound(level, AT, inputs, n)
    r = _Reader(inputs)
    base = _common_base(inputs)
    db = inputs.delta_bar
    tag = f"zero-factor/{_level_name(level, AT)}"
    idx = tuple(range(n))

    if level is F:
        kf = [r.cert(i, F, AT).kappa for i in idx]
        nf = [r.cert(i, F, AT).order for i in idx]
        m = [0.0 if i in zeros else r.truth(i, Quantity.ABS_F, AT) for i in idx]
        mt = [r.model(i, Quantity.ABS_F, AT) for i in idx]
        best = None
        for z in zeros:
            rest = [i for i in idx if i != z]
            sigma = (z, *rest)
            # A zero truth factor in the prefix annihilates every later term.
            raws = _ordering_raws(sigma, m, mt, kf, nf)[:1]
            order = nf[z]
            total = _subtotal(raws, order, db) if not order.is_infinite else 0.0
            key = (-float(order), total)
            if best is None or key < best[0]:
                best = (key, order, raws)
        _, order, raws = best
    else:
        _require_exact_function_at(r, idx, "zero-factor gradient refinement")
        kg = [r.cert(i, G, AT).kappa for i in idx]
        ng = [r.cert(i, G, AT).order for i in idx]
        if len(zeros) >= 2:
            order = INFINITY
            raws = []
        else:
            (z,) = zeros
            fv = [r.truth(i, Quantity.ABS_F, AT) if i != z else 0.0 for i in idx]
            order = ng[z]
            raws = [_Raw(f"prod_(j!={z + 1}) |f_j(x0)| kappa_g[{z + 1}]", math.prod(fv[j] for j in idx if j != z), kg[z], ng[z])]

    if not order > plain.order:
        return plain
    if order.is_infinite:
        terms = [TraceTerm(tag, f"zero factors {tuple(z + 1 for z in zeros)}: exact", 0.0)]
    else:
        terms = _fold(raws, order, db, tag)
    return _result(level, AT, order, terms, r, db, base)
