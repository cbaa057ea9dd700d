import numpy as np
import pytest
from scipy import stats

from prcp._rng import derive_seed, rng_for
from prcp.noise import (
    NoiseScheme,
    PerturbationBudget,
    gaussian_acceptance,
    sample_gaussian_ball,
    sample_shell_scheme,
    sample_uniform_ball,
)


def norms(a):
    return np.linalg.norm(a, axis=1)


class TestUniformBall:
    def test_zero_radius(self):
        out = sample_uniform_ball(PerturbationBudget(0.0, 5), 10, 0)
        assert out.shape == (10, 5)
        assert not out.any()

    def test_in_ball(self):
        out = sample_uniform_ball(PerturbationBudget(0.125, 32), 128, 1)
        assert out.shape == (128, 32)
        assert (norms(out) <= 0.125 * (1 + 1e-12)).all()

    def test_seed_repeat(self):
        b = PerturbationBudget(0.5, 4)
        np.testing.assert_array_equal(sample_uniform_ball(b, 64, 3), sample_uniform_ball(b, 64, 3))

    def test_radial_cdf_ks(self):
        d, r = 8, 0.125
        out = sample_uniform_ball(PerturbationBudget(r, d), 100_000, 11)
        # P(||eps|| <= t r) = t^d, so (||eps||/r)^d is uniform on [0, 1].
        p = stats.kstest((norms(out) / r) ** d, "uniform").pvalue
        assert p > 1e-3

    def test_direction_isotropic(self):
        out = sample_uniform_ball(PerturbationBudget(1.0, 3), 100_000, 5)
        u = out / norms(out)[:, None]
        # First coordinate of a uniform direction in 3D is uniform on [-1, 1].
        assert stats.kstest(u[:, 0], "uniform", args=(-1, 2)).pvalue > 1e-3


class TestShell:
    def test_default_eval_layout(self):
        out = sample_shell_scheme(PerturbationBudget(0.125, 8), 64, 2, 0)
        assert out.shape == (128, 8)

    def test_single(self):
        out = sample_shell_scheme(PerturbationBudget(0.3, 4), 1, 1, 0)
        assert norms(out)[0] == pytest.approx(0.3, rel=1e-12)

    def test_radii_enumeration(self):
        K, per, r = 5, 3, 0.125
        out = sample_shell_scheme(PerturbationBudget(r, 6), K, per, 2)
        expected = np.repeat(r * np.arange(1, K + 1) / K, per)
        np.testing.assert_allclose(np.sort(norms(out)), expected, rtol=1e-12)

    def test_layout_default_per_radius(self):
        assert NoiseScheme("shell").shell_layout(128) == (64, 2)
        assert NoiseScheme("shell", shells=32).shell_layout(128) == (32, 4)
        with pytest.raises(ValueError):
            NoiseScheme("shell", shells=3).shell_layout(128)


def rejection_gaussian(budget, sigma, count, rng):
    out = []
    while len(out) < count:
        g = sigma * rng.standard_normal((4 * count, budget.dim))
        out.extend(g[norms(g) <= budget.radius])
    return np.array(out[:count])


class TestGaussian:
    def test_inside_ball_high_dim(self):
        out = sample_gaussian_ball(PerturbationBudget(0.125, 32), 0.125, 1000, 0)
        assert (norms(out) <= 0.125 * (1 + 1e-12)).all()

    def test_tiny_sigma(self):
        out = sample_gaussian_ball(PerturbationBudget(0.125, 8), 1e-9, 100, 0)
        assert np.abs(out).max() < 1e-7

    def test_mean_clt(self):
        sigma, n = 0.125, 100_000
        out = sample_gaussian_ball(PerturbationBudget(0.125, 32), sigma, n, 4)
        assert (np.abs(out.mean(axis=0)) <= 5 * sigma / np.sqrt(n)).all()

    def test_matches_rejection_sampler(self):
        # Literal rejection sampling is the reference definition of the law.
        budget, sigma = PerturbationBudget(0.125, 8), 0.125
        ours = norms(sample_gaussian_ball(budget, sigma, 20_000, 1))
        ref = norms(rejection_gaussian(budget, sigma, 20_000, np.random.default_rng(2)))
        assert stats.ks_2samp(ours, ref).pvalue > 1e-3

    def test_acceptance_value(self):
        acc = gaussian_acceptance(PerturbationBudget(0.125, 8), 0.125)
        assert acc == pytest.approx(stats.chi2.cdf(1.0, 8))

    def test_underflow_rejected(self):
        with pytest.raises(ValueError, match="no representable mass"):
            sample_gaussian_ball(PerturbationBudget(1e-6, 64), 1e6, 4, 0)

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            NoiseScheme("gaussian")


class TestStreams:
    def test_disjoint_subseeds_do_not_overlap(self):
        a = rng_for(0, 1).integers(0, 2**63, size=1_000_000, dtype=np.uint64)
        b = rng_for(0, 2).integers(0, 2**63, size=1_000_000, dtype=np.uint64)
        assert np.intersect1d(a, b).size == 0

    def test_derive_seed_stable_and_distinct(self):
        assert derive_seed(5, 1, 2) == derive_seed(5, 1, 2)
        assert len({derive_seed(5, k) for k in range(1000)}) == 1000

    def test_budget_validation(self):
        with pytest.raises(ValueError):
            PerturbationBudget(-1.0, 2)
        with pytest.raises(NotImplementedError):
            PerturbationBudget(1.0, 2, norm_order=1)

    def test_project(self):
        b = PerturbationBudget(1.0, 2)
        np.testing.assert_allclose(b.project(np.array([[3.0, 4.0], [0.1, 0.0]])), [[0.6, 0.8], [0.1, 0.0]])
