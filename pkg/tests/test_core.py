import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modelcalc.core import (
    INFINITY,
    AccuracyCertificate,
    Ball,
    CertificateMismatchError,
    CombinedBound,
    DerivativeLevel,
    IncompleteInputsError,
    Locality,
    Order,
    OrderViolationError,
    Quantity,
    Side,
    TraceTerm,
    UniformBound,
    bound_from_certificate,
    matrix_norm,
    min_order,
    weaken_order,
)

F, G, H = DerivativeLevel.FUNCTION, DerivativeLevel.GRADIENT, DerivativeLevel.HESSIAN
AT, NEAR = Locality.AT, Locality.NEAR


def cert(order, kappa, delta_bar=0.5, level=F, loc=AT, base=(0.0,)):
    return AccuracyCertificate(level, order, kappa, loc, base, delta_bar)


def truth(q, value, delta_bar=0.5, loc=AT, base=(0.0,)):
    return UniformBound(q, value, loc, base, delta_bar)


class TestOrder:
    def test_infinity_is_largest(self):
        assert Order.of(3) < INFINITY
        assert Order.of("inf") is INFINITY or Order.of("inf") == INFINITY
        assert str(INFINITY) == "inf" and str(Order.of(2)) == "2"

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            Order.of(-1)

    def test_infinite_order_needs_zero_kappa(self):
        with pytest.raises(OrderViolationError):
            cert(INFINITY, 1.0)


class TestWeakenOrder:
    def test_lowers_order_and_scales_kappa(self):
        w = weaken_order(cert(2, 3.0), 1)
        assert w.order == Order.of(1) and w.kappa == pytest.approx(1.5, rel=1e-15)

    def test_same_order_is_identity(self):
        c = cert(2, 3.0)
        assert weaken_order(c, 2) == c

    def test_infinite_becomes_zero_constant(self):
        w = weaken_order(cert(INFINITY, 0.0), 3)
        assert w.order == Order.of(3) and w.kappa == 0.0

    def test_cannot_raise_order(self):
        with pytest.raises(OrderViolationError):
            weaken_order(cert(1, 1.0), 2)

    @given(
        n=st.integers(2, 6),
        steps=st.tuples(st.integers(0, 3), st.integers(0, 3)),
        kappa=st.floats(1e-3, 1e3),
        db=st.floats(1e-3, 2.0),
    )
    def test_weakening_composes(self, n, steps, kappa, db):
        mid = max(0, n - steps[0])
        low = max(0, mid - steps[1])
        c = cert(n, kappa, db)
        twice = weaken_order(weaken_order(c, mid), low)
        once = weaken_order(c, low)
        assert twice.order == once.order
        assert twice.kappa == pytest.approx(once.kappa, rel=1e-12)


class TestBoundFromCertificate:
    def test_examples(self):
        assert bound_from_certificate(cert(1, 1.0, 1.0), truth(Quantity.ABS_F, 1.0, 1.0)).value == 2.0
        assert bound_from_certificate(cert(INFINITY, 0.0), truth(Quantity.ABS_F, 7.0)).value == 7.0
        c = cert(2, 4.0, 0.5, level=G)
        assert bound_from_certificate(c, truth(Quantity.NORM_GRAD, 3.0)).value == 4.0

    def test_result_is_model_side(self):
        b = bound_from_certificate(cert(1, 1.0, 1.0), truth(Quantity.ABS_F, 1.0, 1.0))
        assert b.side is Side.MODEL

    @pytest.mark.parametrize(
        "c, t",
        [
            (cert(1, 1.0, level=G), truth(Quantity.ABS_F, 1.0)),
            (cert(1, 1.0), truth(Quantity.ABS_F, 1.0, base=(1.0,))),
            (cert(1, 1.0), truth(Quantity.ABS_F, 1.0, loc=NEAR)),
            (cert(1, 1.0, 0.5), truth(Quantity.ABS_F, 1.0, 0.25)),
        ],
    )
    def test_mismatch(self, c, t):
        with pytest.raises(CertificateMismatchError):
            bound_from_certificate(c, t)

    @given(k1=st.floats(0, 10), k2=st.floats(0, 10), m1=st.floats(0, 10), m2=st.floats(0, 10), n=st.integers(0, 4))
    def test_monotone(self, k1, k2, m1, m2, n):
        lo = bound_from_certificate(cert(n, min(k1, k2)), truth(Quantity.ABS_F, min(m1, m2))).value
        hi = bound_from_certificate(cert(n, max(k1, k2)), truth(Quantity.ABS_F, max(m1, m2))).value
        assert lo <= hi


class TestMinOrder:
    def test_examples(self):
        assert min_order([Order.of(2), Order.of(1)]) == Order.of(1)
        assert min_order([INFINITY, Order.of(3)]) == Order.of(3)
        assert min_order([2, 2, 2]) == Order.of(2)

    orders = st.one_of(st.integers(0, 9).map(Order.of), st.just(INFINITY))

    @given(a=orders, b=orders, c=orders)
    def test_lattice_laws(self, a, b, c):
        assert min_order([a, b]) == min_order([b, a])
        assert min_order([min_order([a, b]), c]) == min_order([a, min_order([b, c])])
        assert min_order([a, a]) == a


class TestMatrixNorm:
    def test_examples(self):
        assert matrix_norm(np.eye(2)) == pytest.approx(math.sqrt(2), rel=1e-15)
        assert matrix_norm(np.zeros((3, 3))) == 0.0
        assert matrix_norm([[3, 0], [0, 4]]) == 5.0

    @given(
        u=st.lists(st.floats(-10, 10), min_size=1, max_size=8),
        v=st.lists(st.floats(-10, 10), min_size=1, max_size=8),
    )
    def test_rank_one(self, u, v):
        u, v = np.array(u), np.array(v)
        expected = np.linalg.norm(u) * np.linalg.norm(v)
        assert matrix_norm(np.outer(u, v)) == pytest.approx(expected, rel=1e-12, abs=1e-300)


class TestBall:
    def test_sample_contains_center_and_axes(self):
        X = Ball((0.5, -0.5), 0.25).sample(16, seed=3)
        assert np.array_equal(X[0], [0.5, -0.5])
        assert np.allclose(X[1], [0.75, -0.5])
        assert np.all(np.linalg.norm(X - [0.5, -0.5], axis=1) <= 0.25 * (1 + 1e-12))

    def test_prefix_stable(self):
        ball = Ball((0.0, 0.0, 0.0), 1.0)
        small, large = ball.sample(32, seed=5), ball.sample(64, seed=5)
        assert np.array_equal(large[: len(small)], small)


class TestCombinedBound:
    def test_zero_constant_bounds_zero(self):
        b = CombinedBound(F, AT, INFINITY, 0.0, (TraceTerm("t", "exact", 0.0),), 0.5)
        assert b.bound(1e-3) == 0.0 and b.tag == "t"

    def test_round_trip_to_certificate(self):
        b = CombinedBound(G, NEAR, 2, 1.5, (TraceTerm("t", "x", 1.5),), 0.5, (0.0,))
        c = b.as_certificate()
        assert (c.level, c.locality, c.order, c.kappa, c.delta_bar) == (G, NEAR, Order.of(2), 1.5, 0.5)


def test_incomplete_inputs_names_symbol():
    exc = IncompleteInputsError("M_grad_f[2]@near")
    assert "M_grad_f[2]@near" in str(exc) and exc.symbol == "M_grad_f[2]@near"
