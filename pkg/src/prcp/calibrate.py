"""Calibration procedures and prediction-set construction.

Four thresholds are provided:

``vanilla``
    Split-conformal quantile of clean calibration scores.
``inflated-AR``
    Clean quantile plus a uniform inflation constant ``M_r``; covers every
    perturbation in the ball when the score is ``M_r``-inflated.
``iPRCP``
    Clean quantile at level ``1 - (1 - alpha) / (1 - eta)`` plus a
    high-probability inflation constant ``M_{r,eta}``.
``aPRCP``
    Quantile-of-quantile: for each calibration example, the
    ``(1 - alpha_tilde)`` quantile of its scores over ``m`` random
    perturbations; then the ``(1 - alpha + s)`` conformal quantile of those,
    with ``alpha_tilde = 1 - (1 - alpha) / (1 - alpha + s)``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._rng import rng_for
from .classifier import SyntheticSoftmaxClassifier
from .noise import NoiseScheme, PerturbationBudget
from .quantile import INF, empirical_quantile, quantile_at_level, robust_quantiles
from .scores import all_label_scores, check_score_kind, label_scores

METHODS: tuple[str, ...] = ("vanilla", "inflated-AR", "iPRCP", "aPRCP")

# Sub-stream tags under a calibration seed.
_STREAM_CAL_NOISE = 1
_STREAM_CAL_APS = 2
_STREAM_SHARED = 3


def _float_or_inf(v) -> float:
    if isinstance(v, str):
        if v.strip().lower() in ("+inf", "inf", "infinity", "+infinity"):
            return INF
        raise ValueError(f"cannot parse threshold value {v!r}")
    return float(v)


@dataclass
class Threshold:
    value: float
    method: str
    params: dict = field(default_factory=dict)
    n: int = 0
    m: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if math.isnan(self.value) or self.value < 0:
            raise ValueError(f"threshold must be >= 0 or +inf, got {self.value!r}")

    @property
    def is_infinite(self) -> bool:
        return math.isinf(self.value)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "params": dict(self.params),
            "value": "+inf" if self.is_infinite else self.value,
            "n": self.n,
            "m": self.m,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Threshold":
        return cls(
            value=_float_or_inf(d["value"]),
            method=d["method"],
            params=dict(d.get("params", {})),
            n=int(d.get("n", 0)),
            m=d.get("m"),
            seed=d.get("seed"),
        )


def _check_alpha(alpha: float) -> None:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")


def vanilla_cp_threshold(cal_scores, alpha: float) -> Threshold:
    scores = np.asarray(cal_scores, dtype=float).ravel()
    if scores.size == 0:
        raise ValueError("empty calibration set")
    q = empirical_quantile(scores, alpha)
    return Threshold(q.value, "vanilla", {"alpha": alpha}, n=scores.size)


def inflated_ar_threshold(cal_scores, alpha: float, m_r: float) -> Threshold:
    """Clean conformal quantile plus ``m_r``; ``+inf`` absorbs the shift."""
    if not m_r >= 0:
        raise ValueError(f"inflation constant must be >= 0, got {m_r!r}")
    base = vanilla_cp_threshold(cal_scores, alpha)
    return Threshold(base.value + m_r, "inflated-AR", {"alpha": alpha, "m_r": m_r}, n=base.n)


def iprcp_alpha(alpha: float, eta: float) -> float:
    """``1 - (1 - alpha) / (1 - eta)``, the clean-quantile level of iPRCP."""
    _check_alpha(alpha)
    if not 0.0 <= eta <= alpha:
        raise ValueError(f"eta must lie in [0, alpha], got eta={eta!r}, alpha={alpha!r}")
    return 1.0 - (1.0 - alpha) / (1.0 - eta)


def iprcp_threshold(cal_scores, alpha: float, eta: float, m_r_eta: float) -> Threshold:
    if not m_r_eta >= 0:
        raise ValueError(f"inflation constant must be >= 0, got {m_r_eta!r}")
    a_star = iprcp_alpha(alpha, eta)
    scores = np.asarray(cal_scores, dtype=float).ravel()
    if scores.size == 0:
        raise ValueError("empty calibration set")
    q = quantile_at_level(scores, 1.0 - a_star)
    params = {"alpha": alpha, "eta": eta, "alpha_star": a_star, "m_r": m_r_eta}
    return Threshold(q.value + m_r_eta, "iPRCP", params, n=scores.size)


class AprcpParams(NamedTuple):
    alpha: float
    s: float
    alpha_tilde: float


def derive_aprcp_params(alpha: float, s: float | None = None, alpha_tilde: float | None = None) -> AprcpParams:
    """Complete ``(alpha, s, alpha_tilde)`` from ``alpha`` and one of the other two.

    ``alpha_tilde = 1 - (1 - alpha) / (1 - alpha + s)``, inversely
    ``s = (1 - alpha) * alpha_tilde / (1 - alpha_tilde)``.

    >>> derive_aprcp_params(0.1, alpha_tilde=0.1).s
    0.1
    """
    _check_alpha(alpha)
    if s is None and alpha_tilde is None:
        raise ValueError("give s or alpha_tilde")
    if s is not None:
        if not 0.0 <= s <= alpha:
            raise ValueError(f"s must lie in [0, alpha], got s={s!r}, alpha={alpha!r}")
        at = 1.0 - (1.0 - alpha) / (1.0 - alpha + s)
        if alpha_tilde is not None and abs(at - alpha_tilde) > 1e-9:
            raise ValueError(f"s={s} implies alpha_tilde={at:.12g}, inconsistent with alpha_tilde={alpha_tilde}")
        return AprcpParams(alpha, float(s), at)
    if not 0.0 <= alpha_tilde < 1.0:
        raise ValueError(f"alpha_tilde must lie in [0, 1), got {alpha_tilde!r}")
    s_val = (1.0 - alpha) * alpha_tilde / (1.0 - alpha_tilde)
    if s_val > alpha + 1e-12:
        raise ValueError(f"alpha_tilde={alpha_tilde} implies s={s_val:.6g} > alpha={alpha}")
    return AprcpParams(alpha, min(s_val, alpha), float(alpha_tilde))


def cross_domain_alpha(alpha: float, s: float, d: float) -> float:
    """Inner level ``1 - d - (1 - alpha) / (1 - alpha + s)`` for a noise density gap ``d``."""
    if not d >= 0:
        raise ValueError(f"density gap d must be >= 0, got {d!r}")
    base = derive_aprcp_params(alpha, s=s).alpha_tilde
    adj = base - d
    if adj < 0:
        raise ValueError(
            f"density gap d={d} exceeds the slack alpha_tilde={base:.6g} available at "
            f"alpha={alpha}, s={s}; increase s or reduce d"
        )
    return adj


@dataclass
class CalibrationRecord:
    """Perturbed calibration scores ``(n, m)`` and their per-row robust quantiles."""

    scores: np.ndarray
    robust_quantiles: np.ndarray
    inner_alpha: float


def aprcp_threshold_from_robust(robust_q, alpha: float, s: float):
    """Outer step: the ``ceil((n+1)(1-alpha+s))``-th smallest robust quantile."""
    q = np.asarray(robust_q, dtype=float)
    if q.size == 0:
        raise ValueError("empty calibration set")
    # 1 - alpha + s can land a few ulps above 1 when s == alpha.
    return quantile_at_level(q, min(1.0, 1.0 - alpha + s))


def _aprcp_threshold(
    S: np.ndarray, alpha: float, s, alpha_tilde, d_gap: float, n: int, m: int, seed
) -> tuple[Threshold, CalibrationRecord]:
    p = derive_aprcp_params(alpha, s, alpha_tilde)
    inner = cross_domain_alpha(alpha, p.s, d_gap) if d_gap else p.alpha_tilde
    rq = robust_quantiles(S, inner)
    q = aprcp_threshold_from_robust(rq, alpha, p.s)
    params = {"alpha": alpha, "s": p.s, "alpha_tilde": p.alpha_tilde, "d_gap": d_gap, "inner_alpha": inner}
    return Threshold(q.value, "aPRCP", params, n=n, m=m, seed=seed), CalibrationRecord(S, rq, inner)


def draw_calibration_noise(
    n: int,
    m: int,
    budget: PerturbationBudget,
    scheme: NoiseScheme,
    seed: int,
    score_kind: str = "hps",
    shared: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Perturbations ``(n, m, d)`` and APS randomizers ``(n, m)`` for calibration.

    Row ``i`` comes from its own sub-stream of ``seed``, so the draws do not
    depend on how rows are scheduled. With ``shared=True`` one set of ``m``
    perturbations is reused for every row.
    """
    eps = np.empty((n, m, budget.dim))
    if shared:
        eps[:] = scheme.sample(budget, m, rng_for(seed, _STREAM_SHARED))
    else:
        for i in range(n):
            eps[i] = scheme.sample(budget, m, rng_for(seed, _STREAM_CAL_NOISE, i))
    u = None
    if check_score_kind(score_kind) == "aps":
        u = np.empty((n, m))
        for i in range(n):
            u[i] = rng_for(seed, _STREAM_CAL_APS, i).random(m)
    return eps, u


def perturbed_scores(
    clf: SyntheticSoftmaxClassifier,
    x: np.ndarray,
    y: np.ndarray,
    eps: np.ndarray,
    score_kind: str = "hps",
    u: np.ndarray | None = None,
    threads: int = 1,
) -> np.ndarray:
    """``S[i, j] = S(x[i] + eps[i, j], y[i])``."""
    n, m = eps.shape[:2]
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.intp)

    def block(lo: int, hi: int) -> np.ndarray:
        probs = clf.predict_proba((x[lo:hi, None, :] + eps[lo:hi]).reshape(-1, x.shape[1]))
        labels = np.repeat(y[lo:hi], m)
        uu = None if u is None else u[lo:hi].ravel()
        return label_scores(probs, labels, score_kind, uu).reshape(hi - lo, m)

    return map_rows(block, n, threads, out_shape=(n, m))


def map_rows(block, n: int, threads: int, out_shape) -> np.ndarray:
    """Fill ``out`` by row blocks; ``block(lo, hi)`` must be a pure function of its rows."""
    out = np.empty(out_shape)
    if n == 0:
        return out
    chunk = max(1, min(512, -(-n // max(threads, 1))))
    bounds = [(lo, min(lo + chunk, n)) for lo in range(0, n, chunk)]
    if threads <= 1:
        for lo, hi in bounds:
            out[lo:hi] = block(lo, hi)
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for (lo, hi), res in zip(bounds, pool.map(lambda b: block(*b), bounds)):
                out[lo:hi] = res
    return out


def aprcp_calibrate(
    x,
    y,
    clf: SyntheticSoftmaxClassifier,
    budget: PerturbationBudget,
    alpha: float,
    s: float | None = None,
    *,
    alpha_tilde: float | None = None,
    m: int = 128,
    noise: NoiseScheme | None = None,
    score_kind: str = "hps",
    d_gap: float = 0.0,
    seed: int = 0,
    perturbations: np.ndarray | None = None,
    shared_draws: bool = False,
    threads: int = 1,
) -> tuple[Threshold, CalibrationRecord]:
    """Adaptive quantile-of-quantile calibration.

    Parameters
    ----------
    x, y : array_like
        Calibration inputs ``(n, d)`` and labels ``(n,)``.
    clf : SyntheticSoftmaxClassifier
        Model mapping perturbed inputs to class probabilities.
    budget : PerturbationBudget
        Ball the perturbations live in.
    alpha : float
        Target miscoverage.
    s, alpha_tilde : float, optional
        Conservativeness knob; give one, the other is derived.
    m : int
        Perturbations per calibration example.
    noise : NoiseScheme
        Calibration noise distribution, uniform-in-ball by default.
    d_gap : float
        Density gap between calibration and test noise; lowers the inner
        level to ``alpha_tilde - d_gap``.
    perturbations : ndarray, optional
        Fixed ``(m, d)`` perturbation set used for every example instead of
        random draws (exhaustive or common-random-number calibration).
    shared_draws : bool
        Draw one random set of ``m`` perturbations and reuse it for all rows.

    Returns
    -------
    (Threshold, CalibrationRecord)
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=np.intp)
    n = y.size
    if n == 0:
        raise ValueError("empty calibration set")
    if x.shape != (n, clf.dim):
        raise ValueError(f"expected x of shape ({n}, {clf.dim}), got {x.shape}")
    derive_aprcp_params(alpha, s, alpha_tilde)
    kind = check_score_kind(score_kind)
    if perturbations is not None:
        P = np.asarray(perturbations, dtype=float)
        if P.ndim != 2 or P.shape[1] != clf.dim or P.shape[0] == 0:
            raise ValueError("perturbations must be a non-empty (m, d) array")
        m = P.shape[0]
        eps = np.broadcast_to(P, (n, m, clf.dim))
        u = None
        if kind == "aps":
            _, u = draw_calibration_noise(n, m, budget, NoiseScheme("uniform"), seed, kind)
    else:
        if m < 1:
            raise ValueError("m must be >= 1")
        eps, u = draw_calibration_noise(n, m, budget, noise or NoiseScheme("uniform"), seed, kind, shared_draws)
    S = perturbed_scores(clf, x, y, eps, kind, u, threads)
    return _aprcp_threshold(S, alpha, s, alpha_tilde, d_gap, n, m, seed)


def aprcp_threshold_from_scores(
    S, alpha: float, s: float | None = None, alpha_tilde: float | None = None, d_gap: float = 0.0
) -> Threshold:
    """aPRCP threshold from an already computed ``(n, m)`` perturbed-score matrix."""
    S = np.asarray(S, dtype=float)
    return _aprcp_threshold(S, alpha, s, alpha_tilde, d_gap, S.shape[0], S.shape[1], None)[0]


def _tau(threshold) -> float:
    return threshold.value if isinstance(threshold, Threshold) else float(threshold)


def prediction_set_mask(probs, threshold, score_kind: str = "hps", u=None) -> np.ndarray:
    """Boolean ``(N, C)`` membership: label ``y`` is in row ``i``'s set iff its score is ``<= tau``."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    tau = _tau(threshold)
    if math.isinf(tau) and tau > 0:
        return np.ones(probs.shape, dtype=bool)
    return all_label_scores(probs, score_kind, u) <= tau


def prediction_set(probs, threshold, score_kind: str = "hps", seed=None) -> frozenset[int]:
    """Labels of a single probability vector whose score is within the threshold.

    >>> sorted(prediction_set([0.6, 0.3, 0.1], 0.5))
    [0]
    """
    u = None
    if check_score_kind(score_kind) == "aps":
        u = np.random.default_rng(seed).random(1)
    mask = prediction_set_mask(probs, threshold, score_kind, u)[0]
    return frozenset(int(k) for k in np.flatnonzero(mask))
