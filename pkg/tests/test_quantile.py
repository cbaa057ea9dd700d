import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import naive_quantile, naive_robust_quantile
from prcp.quantile import (
    concentration_check,
    concentration_half_width,
    conformal_rank,
    empirical_quantile,
    quantile_at_level,
    robust_quantile,
    robust_quantiles,
)

score_lists = st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=40)
alphas = st.floats(0.001, 0.999)


class TestEmpirical:
    def test_examples(self):
        assert empirical_quantile(range(1, 10), 0.1).value == 9
        q = empirical_quantile(range(1, 10), 0.5)
        assert (q.value, q.index) == (5, 5)
        q = empirical_quantile([1, 2, 3], 0.1)
        assert q.value == math.inf and q.overflow and q.index == 4

    def test_domain(self):
        for a in (0.0, 1.0, -0.1, 1.5):
            with pytest.raises(ValueError):
                empirical_quantile([1, 2], a)
        with pytest.raises(ValueError):
            empirical_quantile([], 0.1)
        with pytest.raises(ValueError):
            empirical_quantile([1.0, float("nan")], 0.1)

    def test_rank_snapping(self):
        # 0.9 * 10 is 9.000000000000002 in binary floating point.
        assert conformal_rank(9, 0.9) == 9
        assert conformal_rank(9, 0.91) == 10

    @given(score_lists, alphas)
    def test_matches_oracle(self, scores, alpha):
        assert empirical_quantile(scores, alpha).value == naive_quantile(scores, alpha)

    @given(score_lists, alphas, alphas)
    def test_monotone_in_alpha(self, scores, a1, a2):
        a1, a2 = sorted((a1, a2))
        assert empirical_quantile(scores, a1).value >= empirical_quantile(scores, a2).value

    def test_level_one_overflows(self):
        assert quantile_at_level([1.0, 2.0], 1.0).value == math.inf


class TestRobust:
    def test_examples(self):
        q = robust_quantile([0.1, 0.2, 0.3, 0.4], 0.5)
        assert (q.value, q.index) == (0.3, 3)
        assert robust_quantile([0.4, 0.1, 0.3, 0.2], 0.0).value == 0.4

    @given(st.floats(-5, 5), st.integers(1, 30), st.floats(0, 0.999))
    def test_constant(self, c, m, at):
        assert robust_quantile([c] * m, at).value == c

    @given(score_lists, st.floats(0, 0.999))
    def test_matches_oracle(self, scores, at):
        assert robust_quantile(scores, at).value == naive_robust_quantile(scores, at)

    @given(score_lists, st.floats(0, 0.999), st.floats(0, 0.999))
    def test_monotone_in_alpha_tilde(self, scores, a1, a2):
        a1, a2 = sorted((a1, a2))
        assert robust_quantile(scores, a1).value >= robust_quantile(scores, a2).value

    @settings(max_examples=30)
    @given(st.integers(1, 12), st.integers(1, 25), st.floats(0, 0.999), st.integers(0, 2**32 - 1))
    def test_rowwise_matches_scalar(self, n, m, at, seed):
        S = np.random.default_rng(seed).random((n, m))
        expected = [robust_quantile(row, at).value for row in S]
        np.testing.assert_array_equal(robust_quantiles(S, at), expected)

    def test_domain(self):
        with pytest.raises(ValueError):
            robust_quantile([1.0], 1.0)


class TestConcentration:
    def test_example_value(self):
        w = concentration_half_width(1000, 0.1, 0.05).half_width
        assert w == pytest.approx(math.sqrt(3 * 0.9 * math.log(40) / 1000), rel=1e-12)
        assert w == pytest.approx(0.0998, abs=5e-5)

    def test_sqrt_scaling(self):
        a = concentration_half_width(500, 0.1, 0.05).half_width
        b = concentration_half_width(2000, 0.1, 0.05).half_width
        assert b / a == pytest.approx(0.5, rel=1e-12)

    def test_chernoff_inversion(self):
        # With delta = 2 exp(-n(1-alpha)/3) the half width equals 1 - alpha.
        n, alpha = 30, 0.1
        delta = 2 * math.exp(-n * (1 - alpha) / 3)
        w = concentration_half_width(n, alpha, delta).half_width
        assert w == pytest.approx(1 - alpha, rel=1e-12)
        assert 2 * math.exp(-n * w**2 / (3 * (1 - alpha))) == pytest.approx(delta, rel=1e-12)

    def test_domain(self):
        with pytest.raises(ValueError):
            concentration_half_width(0, 0.1, 0.05)
        with pytest.raises(ValueError):
            concentration_half_width(10, 0.1, 1.5)

    def test_single_trial(self):
        res = concentration_check(200, 0.1, 0.05, 1, seed=3)
        assert res.rate in (0.0, 1.0)

    def test_small_run_passes(self):
        res = concentration_check(500, 0.1, 0.05, 200, seed=1)
        assert res.passed
        assert res.half_width == concentration_half_width(500, 0.1, 0.05).half_width
