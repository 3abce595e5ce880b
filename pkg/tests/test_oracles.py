import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from modelcalc.core import DerivativeLevel, DimensionMismatchError, Locality, SmoothnessError, INFINITY, Order
from modelcalc.oracles import (
    CATALOGUE,
    Combination,
    LevelSpec,
    SmoothOracle,
    combine_model_classes,
    combine_oracles,
    constant_oracle,
    exact_class,
    make_interpolation_class,
    make_oracle,
    make_synthetic_class,
    make_test_suite,
    scalar_oracle,
    shift_to_interpolate,
)
from modelcalc.verification import DeltaGrid, estimate_order, finite_difference_check, measure_errors

F, G, H = DerivativeLevel.FUNCTION, DerivativeLevel.GRADIENT, DerivativeLevel.HESSIAN
AT, NEAR = Locality.AT, Locality.NEAR
GRID = DeltaGrid.geometric()


def line(name="x"):
    return scalar_oracle(name, 1, linear=[1.0])


class TestCatalogue:
    def test_quadratic_at_origin(self):
        q = make_oracle("quadratic", 2)
        assert q.value(np.zeros(2)) == 0.0
        assert np.array_equal(q.grad(np.zeros(2)), np.zeros(2))

    def test_exp_at_origin(self):
        assert make_oracle("exp", 3).value(np.zeros(3)) == 1.0

    def test_unknown_name(self):
        with pytest.raises(KeyError):
            make_oracle("rosenbrock", 2)

    @pytest.mark.parametrize("oracle", make_test_suite(), ids=lambda o: o.name)
    def test_derivatives_match_finite_differences(self, oracle):
        pts = np.random.default_rng(11).uniform(-0.5, 0.5, size=(10, oracle.dim_in))
        rep = finite_difference_check(oracle, pts)
        assert rep.passed, (rep.max_grad_error, rep.max_hess_error)

    def test_dimension_checked(self):
        with pytest.raises(DimensionMismatchError):
            make_oracle("trig", 2).value(np.zeros(3))


class TestCombineOracles:
    def test_product_of_lines(self):
        p = combine_oracles(Combination.PRODUCT, [line(), line()])
        x = np.array([3.0])
        assert p.value(x) == 9.0 and p.grad(x)[0] == 6.0 and p.hess(x)[0, 0] == 2.0

    def test_reciprocal(self):
        q = combine_oracles(Combination.QUOTIENT, [constant_oracle("one", 1, 1.0), line()])
        x = np.array([2.0])
        assert q.value(x) == 0.5 and q.grad(x)[0] == -0.25 and q.hess(x)[0, 0] == 0.25

    def test_composition_with_identity(self):
        sq = scalar_oracle("sq", 2, quad=np.eye(2))
        c = combine_oracles(Combination.COMPOSITION, [make_oracle("map_identity", 2), sq])
        x = np.array([1.0, 1.0])
        assert c.value(x) == 2.0
        assert np.array_equal(c.grad(x), [2.0, 2.0])
        assert np.array_equal(c.hess(x), 2.0 * np.eye(2))

    @pytest.mark.parametrize("kind, names", [
        (Combination.PRODUCT, ("trig", "exp", "root")),
        (Combination.PRODUCT, ("root", "root2")),
        (Combination.QUOTIENT, ("trig", "positive")),
        (Combination.POWER, ("trig",)),
        (Combination.COMPOSITION, ("map_nonlinear", "trig")),
        (Combination.COMPOSITION, ("map_linear", "exp")),
    ])
    def test_combined_derivatives_match_finite_differences(self, kind, names):
        d = 2
        parts = [make_oracle(names[0], d)]
        if kind is Combination.COMPOSITION:
            parts.append(make_oracle(names[1], parts[0].dim_out))
        else:
            parts += [make_oracle(n, d) for n in names[1:]]
        f = combine_oracles(kind, parts, 3 if kind is Combination.POWER else None)
        pts = np.random.default_rng(5).uniform(-0.5, 0.5, size=(10, d))
        assert finite_difference_check(f, pts).passed

    @given(n=st.integers(1, 4), x=st.lists(st.floats(-1, 1), min_size=2, max_size=2))
    def test_power_equals_repeated_product(self, n, x):
        f = make_oracle("trig", 2)
        p = combine_oracles(Combination.POWER, [f], n)
        x = np.array(x)
        if n == 1:
            assert p.value(x) == pytest.approx(f.value(x), rel=1e-12)
            return
        q = combine_oracles(Combination.PRODUCT, [f] * n)
        for lv in DerivativeLevel:
            assert np.allclose(p.level_batch(lv, x[None]), q.level_batch(lv, x[None]), rtol=1e-12, atol=1e-15)

    def test_quotient_needs_scalars(self):
        with pytest.raises(DimensionMismatchError):
            combine_oracles(Combination.QUOTIENT, [make_oracle("trig", 2), make_oracle("map_linear", 2)])


class TestSyntheticClass:
    x0 = np.array([0.3, -0.2])

    def test_zero_kappa_is_reference(self):
        ref = make_oracle("trig", 2)
        mc = make_synthetic_class(ref, [(F, 1, 0.0, AT), (G, 2, 0.0, AT)], 0.125, seed=1, x0=self.x0)
        series = measure_errors(mc, ref, F, NEAR, GRID, self.x0)
        assert np.all(series.errors == 0.0)

    def test_function_perturbation_is_tight(self):
        ref = make_oracle("exp", 2)
        mc = make_synthetic_class(ref, [LevelSpec(F, Order.of(2), 1.0, AT)], 0.125, seed=1, x0=self.x0)
        series = measure_errors(mc, ref, F, AT, GRID, self.x0)
        assert np.allclose(series.errors, series.deltas**2, rtol=1e-12, atol=0)

    def test_gradient_only_keeps_value_at_base(self):
        ref = make_oracle("exp", 2)
        mc = make_synthetic_class(ref, [(F, INFINITY, 0.0, AT), (G, 1, 1.0, AT)], 0.125, seed=2, x0=self.x0)
        assert np.all(measure_errors(mc, ref, F, AT, GRID, self.x0).errors == 0.0)
        g = measure_errors(mc, ref, G, AT, GRID, self.x0)
        assert np.allclose(g.errors, g.deltas, rtol=1e-12)

    @given(seed=st.integers(0, 1000), n=st.integers(1, 3), kappa=st.floats(0.1, 3.0), level=st.sampled_from(list(DerivativeLevel)))
    def test_certificates_honored(self, seed, n, kappa, level):
        ref = make_oracle("trig", 2)
        mc = make_synthetic_class(ref, [(level, n, kappa, AT)], 0.125, seed=seed, x0=self.x0)
        for lv in DerivativeLevel:
            for loc in Locality:
                c = mc.certificate(lv, loc)
                s = measure_errors(mc, ref, lv, loc, GRID, self.x0)
                assert np.all(s.errors <= np.array([c.bound(d) for d in s.deltas]) * (1 + 1e-9))

    def test_needs_enough_smoothness(self):
        c1 = SmoothOracle("c1", 1, 1, 1, lambda X: X[:, :1] ** 2, lambda X: 2 * X[:, None, :], None)
        with pytest.raises(SmoothnessError):
            make_synthetic_class(c1, [(H, 1, 1.0, AT)], 0.1, seed=0)
        with pytest.raises(SmoothnessError):
            c1.hess(np.zeros(1))


class TestInterpolation:
    @pytest.mark.parametrize("d", [1, 2, 3])
    def test_affine_reproduced(self, d):
        ref = make_oracle("affine", d)
        x0 = np.full(d, 0.25)
        mc = make_interpolation_class(ref, x0, 0.125)
        for lv in (F, G):
            assert np.max(measure_errors(mc, ref, lv, NEAR, GRID, x0).errors) <= 1e-12

    def test_quadratic_orders(self):
        ref = make_oracle("quadratic", 2)
        x0 = np.array([0.3, -0.2])
        mc = make_interpolation_class(ref, x0, 0.125)
        assert estimate_order(measure_errors(mc, ref, F, NEAR, GRID, x0)).slope >= 1.9
        assert estimate_order(measure_errors(mc, ref, G, NEAR, GRID, x0)).slope >= 0.9


class TestShift:
    def test_constant_offset_removed(self):
        ref = scalar_oracle("sq", 1, quad=[[1.0]])
        five = scalar_oracle("sq+5", 1, const=5.0, quad=[[1.0]])
        from modelcalc.oracles import ModelClass

        mc = ModelClass(ref, 0.5, lambda delta: five, base=(0.0,))
        sh = shift_to_interpolate(mc)
        m = sh.model(0.25)
        assert m.value(np.zeros(1)) == 0.0
        assert np.array_equal(m.grad(np.array([0.7])), five.grad(np.array([0.7])))

    def test_derivatives_bitwise_equal(self):
        ref = make_oracle("trig", 2)
        x0 = np.array([0.3, -0.2])
        mc = make_synthetic_class(ref, [(F, 1, 1.0, AT), (G, 1, 1.0, AT), (H, 1, 1.0, AT)], 0.125, seed=4, x0=x0)
        sh = shift_to_interpolate(mc)
        X = np.random.default_rng(0).uniform(-1, 1, size=(20, 2))
        for d in GRID:
            assert np.array_equal(sh.model(d).jac_batch(X), mc.model(d).jac_batch(X))
            assert np.array_equal(sh.model(d).hess_batch(X), mc.model(d).hess_batch(X))
        assert np.all(measure_errors(sh, ref, F, AT, GRID, x0).errors == 0.0)

    def test_shifted_gradient_slope_kept(self):
        ref = make_oracle("exp", 2)
        x0 = np.array([0.3, -0.2])
        mc = make_synthetic_class(ref, [(G, 1, 1.0, AT)], 0.125, seed=4, x0=x0)
        s = estimate_order(measure_errors(shift_to_interpolate(mc), ref, G, AT, GRID, x0))
        assert abs(s.slope - 1.0) < 0.05


class TestCombineModelClasses:
    def test_exact_product_is_exact(self):
        x0 = np.array([0.3, -0.2])
        parts = [exact_class(make_oracle(n, 2), x0, 0.125) for n in ("trig", "exp")]
        mc = combine_model_classes(Combination.PRODUCT, parts)
        for lv in DerivativeLevel:
            assert np.all(measure_errors(mc, mc.reference, lv, NEAR, GRID, x0).errors == 0.0)

    def test_product_slope_follows_min_rule(self):
        x0 = np.array([0.3, -0.2])
        a = make_synthetic_class(make_oracle("positive", 2), [(F, 2, 1.0, AT)], 0.125, seed=1, x0=x0)
        b = make_synthetic_class(make_oracle("exp", 2), [(F, 1, 1.0, AT)], 0.125, seed=2, x0=x0)
        mc = combine_model_classes(Combination.PRODUCT, [a, b])
        slope = estimate_order(measure_errors(mc, mc.reference, F, AT, GRID, x0)).slope
        assert 0.9 <= slope <= 1.3

    def test_order_zero_denominator_error_grows(self):
        x0 = np.array([0.3, -0.2])
        num = exact_class(make_oracle("trig", 2), x0, 0.125)
        den = make_synthetic_class(make_oracle("positive", 2), [(F, 0, 0.5, AT)], 0.125, seed=3, x0=x0)
        mc = combine_model_classes(Combination.QUOTIENT, [num, den])
        errors = measure_errors(mc, mc.reference, F, AT, GRID, x0).errors
        assert np.all(np.diff(errors) >= -1e-15)

    def test_composition_requires_matching_base(self):
        x0 = np.array([0.3, -0.2])
        inner = exact_class(make_oracle("map_linear", 2), x0, 0.125)
        outer = exact_class(make_oracle("trig", 2), np.zeros(2), 0.125)
        from modelcalc.core import CompositionError

        with pytest.raises(CompositionError):
            combine_model_classes(Combination.COMPOSITION, [inner, outer])


def test_catalogue_names_cover_spec_suite():
    assert {"quadratic", "exp", "affine", "map_linear", "map_nonlinear", "map_identity"} <= set(CATALOGUE)
