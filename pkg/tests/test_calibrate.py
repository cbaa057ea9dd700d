import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_classifier
from oracles import naive_quantile
from prcp.calibrate import (
    Threshold,
    aprcp_calibrate,
    aprcp_threshold_from_robust,
    aprcp_threshold_from_scores,
    cross_domain_alpha,
    derive_aprcp_params,
    draw_calibration_noise,
    inflated_ar_threshold,
    iprcp_alpha,
    iprcp_threshold,
    prediction_set,
    prediction_set_mask,
    vanilla_cp_threshold,
)
from prcp.classifier import generate_synthetic_dataset, inflation_bound
from prcp.noise import NoiseScheme, PerturbationBudget


class TestVanillaAndInflated:
    def test_examples(self):
        assert vanilla_cp_threshold(range(1, 10), 0.1).value == 9
        assert vanilla_cp_threshold([1, 2, 3], 0.1).is_infinite
        assert vanilla_cp_threshold([0.4] * 7, 0.2).value == 0.4

    def test_inflated_arithmetic(self):
        assert inflated_ar_threshold([0.6] * 9, 0.1, 0.1).value == pytest.approx(0.7, abs=1e-15)
        assert inflated_ar_threshold(range(1, 10), 0.1, 0.0).value == vanilla_cp_threshold(range(1, 10), 0.1).value
        assert inflated_ar_threshold([1, 2, 3], 0.1, 0.5).is_infinite

    def test_negative_inflation(self):
        with pytest.raises(ValueError):
            inflated_ar_threshold([1.0], 0.1, -0.1)


class TestIprcp:
    def test_alpha_star(self):
        assert iprcp_alpha(0.1, 0.0) == pytest.approx(0.1, abs=1e-15)
        assert iprcp_alpha(0.1, 0.05) == pytest.approx(0.052632, abs=1e-6)
        assert iprcp_alpha(0.1, 0.1) == pytest.approx(0.0, abs=1e-15)

    def test_eta_zero_is_inflated_ar(self, rng):
        sc = rng.random(200)
        assert iprcp_threshold(sc, 0.1, 0.0, 0.05).value == inflated_ar_threshold(sc, 0.1, 0.05).value

    def test_eta_alpha_overflows(self, rng):
        assert iprcp_threshold(rng.random(200), 0.1, 0.1, 0.05).is_infinite

    def test_eta_domain(self):
        with pytest.raises(ValueError):
            iprcp_alpha(0.1, 0.2)


class TestAprcpParams:
    def test_examples(self):
        assert derive_aprcp_params(0.1, s=0.0).alpha_tilde == 0.0
        assert derive_aprcp_params(0.1, s=0.05).alpha_tilde == pytest.approx(0.052632, abs=1e-6)
        assert derive_aprcp_params(0.1, alpha_tilde=0.1).s == pytest.approx(0.1, abs=1e-12)

    @given(st.floats(0.01, 0.5), st.floats(0, 1))
    def test_round_trip(self, alpha, frac):
        p = derive_aprcp_params(alpha, s=alpha * frac)
        q = derive_aprcp_params(alpha, alpha_tilde=p.alpha_tilde)
        assert q.s == pytest.approx(p.s, abs=1e-12)

    def test_inconsistent(self):
        with pytest.raises(ValueError):
            derive_aprcp_params(0.1, s=0.05, alpha_tilde=0.01)
        with pytest.raises(ValueError):
            derive_aprcp_params(0.1, s=0.2)
        with pytest.raises(ValueError):
            derive_aprcp_params(0.1, alpha_tilde=0.5)
        with pytest.raises(ValueError):
            derive_aprcp_params(0.1)

    def test_cross_domain(self):
        assert cross_domain_alpha(0.1, 0.05, 0.0) == derive_aprcp_params(0.1, s=0.05).alpha_tilde
        assert cross_domain_alpha(0.1, 0.05, 0.02) == pytest.approx(0.032632, abs=1e-6)
        with pytest.raises(ValueError, match="exceeds"):
            cross_domain_alpha(0.1, 0.05, 0.06)


class TestAprcpThreshold:
    def test_outer_example(self):
        q = aprcp_threshold_from_robust([0.2, 0.4, 0.3, 0.5], 0.5, 0.1)
        assert (q.value, q.index) == (0.4, 3)

    def test_s_equal_alpha_overflows(self, rng):
        assert math.isinf(aprcp_threshold_from_robust(rng.random(50), 0.1, 0.1).value)

    def test_single_draw_is_vanilla_on_perturbed(self, small_task):
        clf = small_task.bayes_classifier()
        data = generate_synthetic_dataset(small_task, 300, 0)
        budget = PerturbationBudget(0.125, small_task.dim)
        thr, rec = aprcp_calibrate(data.x, data.y, clf, budget, 0.1, 0.0, m=1, seed=3)
        assert thr.value == vanilla_cp_threshold(rec.scores[:, 0], 0.1).value

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(5, 60), st.integers(1, 16), st.sampled_from([0.05, 0.1, 0.2]))
    def test_degenerates_to_worst_case_vanilla(self, seed, n, m, alpha):
        rng = np.random.default_rng(seed)
        clf = random_classifier(rng, 3, 2)
        x = rng.standard_normal((n, 2))
        y = rng.integers(0, 3, n)
        budget = PerturbationBudget(0.2, 2)
        P = rng.standard_normal((m, 2))
        P = 0.2 * P / np.linalg.norm(P, axis=1, keepdims=True)
        thr, rec = aprcp_calibrate(x, y, clf, budget, alpha, 0.0, perturbations=P)
        # Exhaustive adversary: score every enumerated perturbation of sample i.
        worst = [float((1 - clf.predict_proba(x[i] + P)[:, y[i]]).max()) for i in range(n)]
        np.testing.assert_array_equal(rec.robust_quantiles, worst)
        assert thr.value == naive_quantile(worst, alpha)

    def test_s_monotone_at_fixed_inner_level(self, rng):
        S = rng.random((200, 64))
        from prcp.quantile import robust_quantiles

        rq = robust_quantiles(S, 0.03)
        vals = [aprcp_threshold_from_robust(rq, 0.1, s).value for s in np.linspace(0, 0.1, 11)]
        assert all(a <= b for a, b in zip(vals, vals[1:]))

    def test_inner_level_monotone_at_fixed_outer(self, rng):
        S = rng.random((200, 64))
        from prcp.quantile import robust_quantiles

        vals = [aprcp_threshold_from_robust(robust_quantiles(S, at), 0.1, 0.05).value for at in np.linspace(0, 0.5, 11)]
        assert all(a >= b for a, b in zip(vals, vals[1:]))

    def test_coupled_s_is_not_monotone(self):
        # Raising s can keep the outer rank fixed while the inner rank drops,
        # so the coupled threshold can decrease.
        S = np.random.default_rng(0).random((9, 100))
        t0 = aprcp_threshold_from_scores(S, 0.55, s=0.0).value
        t1 = aprcp_threshold_from_scores(S, 0.55, s=0.04).value
        assert t1 < t0

    def test_thread_count_invariant(self, small_task):
        clf = small_task.bayes_classifier()
        data = generate_synthetic_dataset(small_task, 1500, 1)
        budget = PerturbationBudget(0.125, small_task.dim)
        a, ra = aprcp_calibrate(data.x, data.y, clf, budget, 0.1, 0.05, m=16, seed=5, threads=1)
        b, rb = aprcp_calibrate(data.x, data.y, clf, budget, 0.1, 0.05, m=16, seed=5, threads=4)
        assert a.value == b.value
        np.testing.assert_array_equal(ra.scores, rb.scores)

    def test_shared_draws(self):
        eps, _ = draw_calibration_noise(5, 7, PerturbationBudget(0.1, 3), NoiseScheme("uniform"), 0, shared=True)
        assert (eps == eps[0]).all()
        eps, _ = draw_calibration_noise(5, 7, PerturbationBudget(0.1, 3), NoiseScheme("uniform"), 0)
        assert not (eps == eps[0]).all()

    def test_row_streams_independent_of_n(self):
        b = PerturbationBudget(0.1, 3)
        small, _ = draw_calibration_noise(3, 4, b, NoiseScheme("uniform"), 9, "aps")
        big, _ = draw_calibration_noise(10, 4, b, NoiseScheme("uniform"), 9, "aps")
        np.testing.assert_array_equal(small, big[:3])

    def test_cross_domain_lowers_inner_level(self, small_task):
        clf = small_task.bayes_classifier()
        data = generate_synthetic_dataset(small_task, 400, 2)
        budget = PerturbationBudget(0.125, small_task.dim)
        a, _ = aprcp_calibrate(data.x, data.y, clf, budget, 0.1, 0.05, m=32, seed=1)
        b, rec = aprcp_calibrate(data.x, data.y, clf, budget, 0.1, 0.05, m=32, seed=1, d_gap=0.02)
        assert rec.inner_alpha == pytest.approx(0.032632, abs=1e-6)
        assert b.value >= a.value

    def test_aps_calibration_runs(self, small_task):
        clf = small_task.bayes_classifier()
        data = generate_synthetic_dataset(small_task, 200, 2)
        thr, rec = aprcp_calibrate(
            data.x, data.y, clf, PerturbationBudget(0.125, 8), 0.1, 0.05, m=8, score_kind="aps", seed=0
        )
        assert 0 <= thr.value <= 1 and rec.scores.shape == (200, 8)

    def test_corollary_holds_at_s_zero(self, small_task):
        # Each per-sample max is at most clean score + M_r, so tau(s=0) <= tau_AR.
        clf = small_task.bayes_classifier()
        data = generate_synthetic_dataset(small_task, 500, 7)
        budget = PerturbationBudget(0.125, 8)
        thr, _ = aprcp_calibrate(data.x, data.y, clf, budget, 0.1, 0.0, m=64, seed=2)
        clean = 1 - clf.predict_proba(data.x)[np.arange(500), data.y]
        assert thr.value <= inflated_ar_threshold(clean, 0.1, inflation_bound(clf, budget)).value


class TestThresholdArtifact:
    def test_json_round_trip(self):
        for v in (0.25, math.inf):
            t = Threshold(v, "aPRCP", {"alpha": 0.1, "s": 0.05}, n=10, m=4, seed=1)
            back = Threshold.from_dict(json.loads(json.dumps(t.to_dict())))
            assert back == t
        assert Threshold(math.inf, "vanilla").to_dict()["value"] == "+inf"

    def test_rejects_bad(self):
        with pytest.raises(ValueError):
            Threshold(0.1, "rscp")
        with pytest.raises(ValueError):
            Threshold(float("nan"), "vanilla")


class TestPredictionSets:
    def test_examples(self):
        assert prediction_set([0.6, 0.3, 0.1], 0.5) == {0}
        assert prediction_set([0.6, 0.3, 0.1], math.inf) == {0, 1, 2}
        assert prediction_set([0.6, 0.3, 0.1], 0.1) == frozenset()

    @given(st.integers(0, 2**32 - 1), st.floats(0, 1), st.floats(0, 1), st.sampled_from(["hps", "aps"]))
    def test_nested(self, seed, t1, t2, kind):
        t1, t2 = sorted((t1, t2))
        rng = np.random.default_rng(seed)
        probs = rng.dirichlet(np.ones(5), size=20)
        u = rng.random(20)
        a = prediction_set_mask(probs, t1, kind, u)
        b = prediction_set_mask(probs, t2, kind, u)
        assert not (a & ~b).any()
