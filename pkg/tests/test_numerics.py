import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from susbp.numerics import (
    RngStream,
    as_matrix,
    finite_diff_grad,
    fit_power_law,
    mean_component_variance,
    row_softmax,
    stable_mix,
)

# softmax([1, 2, 3]) evaluated with 50-digit arithmetic (mpmath), frozen.
SOFTMAX_123 = np.array(
    [
        0.090030573170380457998,
        0.24472847105479765247,
        0.66524095577482188953,
    ]
)


class TestRowSoftmax:
    def test_symmetric_row(self):
        out = row_softmax(np.array([[0.0, 0.0], [0.0, 0.0]]))
        np.testing.assert_allclose(out, 0.5)

    def test_causal_first_row_is_one_hot(self):
        out = row_softmax(np.array([[3.0, -7.0], [2.0, 5.0]]), causal=True)
        assert out[0, 0] == 1.0
        assert out[0, 1] == 0.0

    def test_against_extended_precision_oracle(self):
        s = np.array([[1.0, 2.0, 3.0]] * 3)
        out = row_softmax(s)
        np.testing.assert_allclose(out[0], SOFTMAX_123, rtol=1e-15)

    def test_non_square_rejected(self):
        with pytest.raises(ValueError, match="square"):
            row_softmax(np.zeros((2, 3)))

    def test_large_magnitude_rows_stable(self):
        rng = np.random.default_rng(11)
        s = rng.uniform(-1e3, 1e3, size=(6, 6))
        for causal in (False, True):
            out = row_softmax(s, causal=causal)
            assert np.all(np.isfinite(out))
            np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    @given(st.integers(min_value=1, max_value=8), st.integers(min_value=0, max_value=2**32))
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one_property(self, n, seed):
        rng = np.random.default_rng(seed)
        s = rng.uniform(-1e3, 1e3, size=(n, n))
        out = row_softmax(s, causal=bool(seed % 2))
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)


class TestFiniteDiffGrad:
    def test_quadratic_exact(self):
        g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), h=1e-5)
        assert abs(g[0] - 6.0) < 1e-9

    def test_constant_function(self):
        g = finite_diff_grad(lambda x: 4.2, np.arange(5, dtype=float))
        np.testing.assert_array_equal(g, 0.0)

    def test_softmax_dot_v_against_analytic_jacobian(self):
        # d/ds_i of softmax(s).v is w_i (v_i - w.v); this closed form is the
        # cross-oracle for the finite-difference routine itself.
        rng = np.random.default_rng(5)
        s = rng.normal(size=6)
        v = rng.normal(size=6)

        def f(x):
            e = np.exp(x - x.max())
            w = e / e.sum()
            return float(w @ v)

        num = finite_diff_grad(f, s, h=1e-6)
        e = np.exp(s - s.max())
        w = e / e.sum()
        ana = w * (v - w @ v)
        rel = np.max(np.abs(num - ana)) / max(np.max(np.abs(ana)), 1e-300)
        assert rel < 1e-6

    def test_nonfinite_function_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            finite_diff_grad(lambda x: float("nan"), np.array([1.0]))

    def test_nonpositive_step_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            finite_diff_grad(lambda x: 0.0, np.array([1.0]), h=0.0)


class TestFitPowerLaw:
    def test_exact_square_law(self):
        xs = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
        fit = fit_power_law(xs, xs**2)
        assert abs(fit.exponent - 2.0) < 1e-10
        assert fit.r_squared == pytest.approx(1.0, abs=1e-12)

    def test_constant_ys(self):
        fit = fit_power_law(np.array([1.0, 2.0, 4.0]), np.array([5.0, 5.0, 5.0]))
        assert abs(fit.exponent) < 1e-12
        assert abs(fit.log_prefactor - np.log(5.0)) < 1e-12
        assert fit.r_squared == 1.0

    def test_noisy_generated_exponent_recovered(self):
        rng = np.random.default_rng(123)
        xs = np.geomspace(0.5, 50.0, 40)
        ys = 3.0 * xs**-1.5 * (1.0 + rng.uniform(-0.05, 0.05, size=xs.size))
        fit = fit_power_law(xs, ys)
        assert abs(fit.exponent - (-1.5)) < 0.1

    def test_domain_and_arity_errors(self):
        with pytest.raises(ValueError, match="positive"):
            fit_power_law([1.0, 2.0], [1.0, -1.0])
        with pytest.raises(ValueError, match="at least 2"):
            fit_power_law([1.0], [1.0])


class TestMeanComponentVariance:
    def test_identical_samples(self):
        s = [np.ones(4)] * 3
        assert mean_component_variance(s) == 0.0

    def test_two_point_spread(self):
        assert mean_component_variance([-np.ones(3), np.ones(3)]) == pytest.approx(2.0)

    def test_gaussian_sigma2(self):
        rng = np.random.default_rng(77)
        samples = [rng.normal(scale=2.0, size=8) for _ in range(10_000)]
        assert mean_component_variance(samples) == pytest.approx(4.0, rel=0.05)

    def test_arity_and_shape_errors(self):
        with pytest.raises(ValueError, match="at least 2"):
            mean_component_variance([np.ones(3)])
        with pytest.raises(ValueError, match="shape"):
            mean_component_variance([np.ones(3), np.ones(4)])

    @given(st.integers(min_value=0, max_value=2**32))
    @settings(max_examples=30, deadline=None)
    def test_permutation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        samples = [rng.normal(size=5) for _ in range(6)]
        perm = rng.permutation(6)
        v1 = mean_component_variance(samples)
        v2 = mean_component_variance([samples[i] for i in perm])
        assert v1 == pytest.approx(v2, rel=1e-12)


class TestRngStream:
    def test_bit_identical_reproduction(self):
        a = RngStream(42, 7).generator().random(16)
        b = RngStream(42, 7).generator().random(16)
        np.testing.assert_array_equal(a, b)

    def test_distinct_streams_differ(self):
        a = RngStream(42, 7).generator().random(16)
        b = RngStream(42, 8).generator().random(16)
        assert not np.array_equal(a, b)

    def test_child_streams_are_stable_and_independent(self):
        base = RngStream(9, 1)
        c1 = base.child(3, 4)
        c2 = base.child(3, 4)
        c3 = base.child(4, 3)
        assert c1 == c2
        assert c1 != c3
        np.testing.assert_array_equal(c1.generator().random(4), c2.generator().random(4))

    def test_stable_mix_is_order_sensitive(self):
        assert stable_mix(1, 2) != stable_mix(2, 1)
        assert stable_mix(1, 2) == stable_mix(1, 2)


class TestAsMatrix:
    def test_rejects_nan(self):
        with pytest.raises(ValueError, match="non-finite"):
            as_matrix(np.array([[1.0, np.nan]]))

    def test_rejects_wrong_ndim(self):
        with pytest.raises(ValueError, match="2-D"):
            as_matrix(np.zeros(3))
