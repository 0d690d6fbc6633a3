import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from itecover import metrics
from itecover.metrics import MetricError


class TestBiasRmse:
    def test_perfect(self):
        theta = np.linspace(-1, 1, 20)
        assert metrics.bias_rmse(theta, theta) == (0.0, 0.0)

    def test_constant_shift(self):
        theta = np.linspace(-1, 1, 20)
        b, r = metrics.bias_rmse(theta + 0.3, theta)
        assert b == pytest.approx(0.3)
        assert r == pytest.approx(0.3)

    def test_two_point(self):
        b, r = metrics.bias_rmse(np.array([1.0, -1.0]), np.zeros(2))
        assert (b, r) == (0.0, 1.0)

    def test_empty(self):
        with pytest.raises(MetricError):
            metrics.bias_rmse(np.array([]), np.array([]))


class TestMisclassBart:
    def draws(self, frac_neg, s=200):
        d = np.full(s, 1.0)
        d[: int(frac_neg * s)] = -1.0
        return d

    def test_positive_truth_mostly_negative_draws(self):
        draws = np.vstack([self.draws(0.6)])
        assert metrics.misclass_bart(draws, np.array([0.5])) == 1.0

    def test_negative_truth_negative_draws(self):
        draws = np.vstack([self.draws(0.9)])
        assert metrics.misclass_bart(draws, np.array([-0.2])) == 0.0

    def test_zero_truth_excluded(self):
        draws = np.vstack([self.draws(0.9), self.draws(0.9)])
        out = metrics.misclass_bart(draws, np.array([0.0, -0.2]))
        assert out == 0.0

    def test_all_zero_truth_errors(self):
        with pytest.raises(MetricError):
            metrics.misclass_bart(np.ones((2, 200)), np.zeros(2))

    def test_consistency_with_point_estimates(self):
        # point-mass draws reduce to the sign rule on point estimates
        rng = np.random.default_rng(0)
        hat = rng.normal(size=50)
        truth = rng.normal(size=50)
        draws = np.repeat(hat[:, None], 150, axis=1)
        assert metrics.misclass_bart(draws, truth) == metrics.misclass_csf(hat, truth)


class TestMisclassCsf:
    def test_wrong_sign(self):
        assert metrics.misclass_csf(np.array([-0.1]), np.array([0.2])) == 1.0

    def test_perfect(self):
        t = np.array([0.5, -0.5, 1.0])
        assert metrics.misclass_csf(t, t) == 0.0

    def test_all_flipped(self):
        t = np.array([0.5, -0.5, 1.0])
        assert metrics.misclass_csf(-t, t) == 1.0


class TestHosmerLemeshow:
    def test_perfect_calibration(self):
        theta = np.linspace(0, 1, 100)
        assert metrics.hosmer_lemeshow(theta, theta) == 0.0

    def test_constant_shift_fixture(self):
        # 100 points, shift c within every decile; hand-computable
        rng = np.random.default_rng(5)
        theta = np.sort(rng.normal(size=100))
        c = 0.25
        hat = theta + c
        stat = metrics.hosmer_lemeshow(hat, theta)
        # residual hat - theta is constant c, so each group variance floors
        expect = sum(10 * c**2 / 1e-6 for _ in range(10))
        assert stat == pytest.approx(expect)

    def test_within_decile_permutation_invariance(self):
        rng = np.random.default_rng(7)
        hat = np.sort(rng.normal(size=100))
        truth = rng.normal(size=100)
        base = metrics.hosmer_lemeshow(hat, truth)
        perm = np.arange(100)
        for g in range(10):
            seg = perm[g * 10 : (g + 1) * 10]
            rng.shuffle(seg)
        assert metrics.hosmer_lemeshow(hat[perm], truth[perm]) == pytest.approx(base)

    def test_few_distinct_values_collapse(self):
        hat = np.repeat([0.0, 1.0, 2.0], 20)
        truth = np.zeros(60)
        assert metrics.hosmer_lemeshow(hat, truth) >= 0.0

    def test_single_value_errors(self):
        with pytest.raises(MetricError):
            metrics.hosmer_lemeshow(np.zeros(60), np.zeros(60))


class TestCoverage:
    def test_infinite_proxy(self):
        iv = np.array([[-1e308, 1e308]] * 5)
        assert metrics.coverage(iv, np.zeros(5)) == 1.0

    def test_closed_endpoints(self):
        iv = np.array([[0.0, 1.0], [0.0, 1.0]])
        assert metrics.coverage(iv, np.array([0.5, 1.0])) == 1.0

    def test_degenerate(self):
        iv = np.array([[0.3, 0.3]])
        assert metrics.coverage(iv, np.array([0.3])) == 1.0

    def test_invalid_interval(self):
        with pytest.raises(MetricError):
            metrics.coverage(np.array([[1.0, 0.0]]), np.array([0.5]))


class TestNullFlagsCsf:
    def test_no_flags_when_equal(self):
        hat = np.full(10, 0.5)
        ci = np.column_stack([hat - 0.1, hat + 0.1])
        assert metrics.null_flags_csf(hat, ci) == 0.0

    def test_one_flag(self):
        hat = np.zeros(10)
        ci = np.column_stack([hat - 0.1, hat + 0.1])
        ci[3] = [0.5, 0.7]
        assert metrics.null_flags_csf(hat, ci) == pytest.approx(0.1)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_rmse_dominates_bias(seed):
    rng = np.random.default_rng(seed)
    n = rng.integers(1, 50)
    hat, truth = rng.normal(size=n), rng.normal(size=n)
    b, r = metrics.bias_rmse(hat, truth)
    assert r >= abs(b) - 1e-12


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_coverage_monotone_in_widening(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 50))
    truth = rng.normal(size=n)
    lo = rng.normal(size=n)
    hi = lo + rng.uniform(0, 2, size=n)
    widen = rng.uniform(0, 1, size=n)
    base = metrics.coverage(np.column_stack([lo, hi]), truth)
    wide = metrics.coverage(np.column_stack([lo - widen, hi + widen]), truth)
    assert wide >= base
