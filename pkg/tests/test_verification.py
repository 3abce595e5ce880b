import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modelcalc.core import (
    AccuracyCertificate,
    Ball,
    CombinedBound,
    DerivativeLevel,
    EstimationError,
    Locality,
    Provenance,
    Quantity,
    TraceTerm,
)
from modelcalc.oracles import (
    ModelClass,
    SmoothOracle,
    constant_oracle,
    exact_class,
    make_oracle,
    make_synthetic_class,
    scalar_oracle,
)
from modelcalc.verification import (
    DeltaGrid,
    ErrorPoint,
    ErrorSeries,
    check_bound,
    estimate_order,
    finite_difference_check,
    measure_errors,
    run_counterexamples,
    sample_uniform_bound,
)

F, G, H = DerivativeLevel.FUNCTION, DerivativeLevel.GRADIENT, DerivativeLevel.HESSIAN
AT, NEAR = Locality.AT, Locality.NEAR
GRID = DeltaGrid.geometric()


def series_of(fn, level=F, loc=AT, grid=GRID):
    return ErrorSeries(level, loc, tuple(ErrorPoint(d, fn(d)) for d in grid))


def bound_of(cert: AccuracyCertificate) -> CombinedBound:
    return CombinedBound(cert.level, cert.locality, cert.order, cert.kappa,
                         (TraceTerm("test", "certificate", cert.kappa),), cert.delta_bar, cert.base)


class TestDeltaGrid:
    def test_geometric(self):
        assert GRID.deltas[0] == 0.125 and GRID.deltas[-1] == 2.0**-10 and len(GRID) == 8

    @pytest.mark.parametrize("deltas", [(0.1, 0.05, 0.02), (0.1, 0.1, 0.05, 0.01), (0.1, 0.05, 0.02, -0.01)])
    def test_rejects_bad_grids(self, deltas):
        with pytest.raises(ValueError):
            DeltaGrid(deltas)


class TestEstimateOrder:
    def test_quadratic_data(self):
        est = estimate_order(series_of(lambda d: d**2))
        assert est.slope == pytest.approx(2.0, abs=1e-10)

    def test_linear_intercept(self):
        est = estimate_order(series_of(lambda d: 3 * d))
        assert est.slope == pytest.approx(1.0, abs=1e-10)
        assert est.intercept == pytest.approx(math.log(3), abs=1e-10)
        assert est.r_squared == pytest.approx(1.0)

    def test_exact_series(self):
        est = estimate_order(series_of(lambda d: 0.0))
        assert est.exact and est.slope == math.inf

    def test_too_few_usable_points(self):
        with pytest.raises(EstimationError):
            estimate_order(series_of(lambda d: d if d > 0.02 else 0.0))

    def test_product_of_mixed_orders(self):
        f1, f2 = make_oracle("positive", 2), make_oracle("exp", 2)
        x0 = (0.3, -0.2)
        from modelcalc.oracles import combine_model_classes

        mc = combine_model_classes("product", [
            make_synthetic_class(f1, [(F, 2, 1.0, AT)], 0.125, 1, x0),
            make_synthetic_class(f2, [(F, 1, 1.0, AT)], 0.125, 2, x0),
        ])
        est = estimate_order(measure_errors(mc, mc.reference, F, AT, GRID, x0))
        assert 0.9 <= est.slope <= 1.3


class TestCheckBound:
    @pytest.mark.parametrize("name", ["trig", "exp", "map_nonlinear"])
    def test_exact_model_passes(self, name):
        ref = make_oracle(name, 2)
        mc = exact_class(ref, (0.1, 0.2), 0.125)
        for cert in mc.certificates:
            series = measure_errors(mc, ref, cert.level, cert.locality, GRID, (0.1, 0.2))
            v = check_bound(series, bound_of(cert))
            assert v.passed and v.worst_ratio == 0.0

    @pytest.mark.parametrize("level", list(DerivativeLevel))
    def test_tight_certificates_pass(self, level):
        ref = make_oracle("trig", 2)
        mc = make_synthetic_class(ref, [(level, 2, 1.0, AT)], 0.125, 7, (0.1, 0.2))
        series = measure_errors(mc, ref, level, AT, GRID, (0.1, 0.2))
        v = check_bound(series, bound_of(mc.certificate(level, AT)))
        assert v.passed and v.worst_ratio == pytest.approx(1.0, rel=1e-9)

    def test_under_reported_kappa_fails(self):
        ref = make_oracle("trig", 2)
        mc = make_synthetic_class(ref, [(G, 1, 1.0, AT)], 0.125, 7, (0.1, 0.2))
        cert = mc.certificate(G, AT)
        series = measure_errors(mc, ref, G, AT, GRID, (0.1, 0.2))
        halved = CombinedBound(G, AT, cert.order, cert.kappa / 2, (TraceTerm("low", "half", 0.5),), 0.125)
        v = check_bound(series, halved)
        assert not v.passed and v.worst_ratio == pytest.approx(2.0, rel=1e-9)
        assert v.tag == "low" and "exceeds" in v.diagnostic

    def test_level_mismatch(self):
        cert = exact_class(make_oracle("trig", 1), (0.0,), 1.0).certificate(G, AT)
        with pytest.raises(ValueError):
            check_bound(series_of(lambda d: 0.0), bound_of(cert))

    def test_divergent_fails(self):
        s = ErrorSeries(F, AT, (ErrorPoint(0.1, math.inf, None, True),) + tuple(ErrorPoint(d, 0.0) for d in (0.05, 0.02, 0.01)))
        cert = exact_class(make_oracle("trig", 1), (0.0,), 1.0).certificate(F, AT)
        assert not check_bound(s, bound_of(cert)).passed


class TestMeasureErrors:
    def test_pole_is_divergent(self):
        one = scalar_oracle("one", 1, const=1.0)
        from modelcalc.oracles import combine_oracles

        mc = ModelClass(one, 1.0, lambda d: combine_oracles("quotient", [one, constant_oracle("z", 1, 0.0)]))
        s = measure_errors(mc, one, F, AT, GRID, (0.0,))
        assert s.divergent
        with pytest.raises(EstimationError):
            estimate_order(s)

    def test_grid_beyond_cap(self):
        ref = make_oracle("trig", 1)
        with pytest.raises(ValueError):
            measure_errors(exact_class(ref, (0.0,), 0.01), ref, F, AT, GRID, (0.0,))

    @given(seed=st.integers(0, 100), n=st.integers(1, 64))
    def test_near_monotone_under_refinement(self, seed, n):
        ref = make_oracle("exp", 2)
        mc = make_synthetic_class(ref, [(F, 1, 1.0, AT), (G, 1, 1.0, AT)], 0.125, seed, (0.1, 0.2))
        grid = DeltaGrid.geometric(count=4)
        coarse = measure_errors(mc, ref, G, NEAR, grid, (0.1, 0.2), n_interior=n, seed=seed)
        fine = measure_errors(mc, ref, G, NEAR, grid, (0.1, 0.2), n_interior=2 * n, seed=seed)
        assert np.all(fine.errors >= coarse.errors)


class TestSampleUniformBound:
    def test_constant(self):
        c = make_oracle("constant", 2)
        b = sample_uniform_bound(c, Quantity.ABS_F, Ball((0.0, 0.0), 1.0))
        assert b.value == 5.0 and b.provenance is Provenance.SAMPLED

    def test_identity_on_unit_ball(self):
        x = scalar_oracle("x", 1, linear=[1.0])
        assert sample_uniform_bound(x, Quantity.ABS_F, Ball((0.0,), 1.0)).value == 1.0

    def test_gradient_of_square_norm(self):
        q = scalar_oracle("xx", 2, quad=np.eye(2))
        b = sample_uniform_bound(q, Quantity.NORM_GRAD, Ball((0.0, 0.0), 1.0))
        assert b.value == pytest.approx(2.0, rel=0.05) and b.value <= 2.0 + 1e-12


class TestFiniteDifference:
    def test_affine_is_exact(self):
        f = make_oracle("affine", 3)
        rep = finite_difference_check(f, np.random.default_rng(0).uniform(-1, 1, (10, 3)))
        assert rep.passed and rep.max_grad_error <= 1e-9 and rep.max_hess_error <= 1e-12

    def test_wrong_gradient_fails(self):
        ref = make_oracle("trig", 2)

        def bad_jac(X):
            J = ref.jac_batch(X).copy()
            J[:, 0, 1] += 1.0
            return J

        bad = SmoothOracle("bad", 2, 1, 2, ref.eval_batch, bad_jac, ref.hess_batch)
        rep = finite_difference_check(bad, np.random.default_rng(0).uniform(-1, 1, (10, 2)))
        assert not rep.passed and rep.max_grad_error > 0.1


class TestCounterexamples:
    def test_default_grid_diverges(self):
        rep = run_counterexamples()
        assert rep.passed
        for r in rep.results:
            assert all(q >= 1.9 for q in r.ratios)

    def test_values_at_one_hundredth(self):
        rep = run_counterexamples(DeltaGrid((0.08, 0.04, 0.02, 0.01)))
        by_name = {r.name: r for r in rep.results}
        for name in ("quotient", "composition"):
            assert by_name[name].series.errors[-1] == pytest.approx(99.0, rel=1e-12)
        g2 = float(np.linalg.norm(make_oracle("trig", 2).grad(np.zeros(2))))
        assert by_name["product"].series.errors[-1] == pytest.approx(100 * g2, rel=1e-9)
