"""Order-statistic quantiles used by every calibration procedure.

Three pieces live here:

* the split-conformal empirical quantile, the ``ceil((n+1)(1-alpha))``-th
  smallest score, which overflows to ``+inf`` when that rank exceeds ``n``;
* the per-example robust quantile over ``m`` perturbation scores, whose rank
  is clamped to ``m`` so that ``alpha_tilde = 0`` picks the sample maximum;
* the concentration half-width for empirical quantiles and a Monte-Carlo
  check of the resulting two-sided sandwich.

``+inf`` is returned as ``math.inf`` and flagged by ``QuantileResult.overflow``;
it is never replaced by a large finite number.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from ._rng import rng_for

INF = math.inf

# Relative slack when deciding whether (n+1)*level is an integer. Guards
# against 0.9 * 10 landing a hair above 9 in binary floating point.
_RANK_RTOL = 1e-9


@dataclass(frozen=True)
class QuantileResult:
    value: float
    index: int
    level: float
    n: int

    @property
    def overflow(self) -> bool:
        return self.index > self.n

    def __float__(self) -> float:
        return self.value


@dataclass(frozen=True)
class ConcentrationBand:
    half_width: float
    n: int
    alpha: float
    delta: float


def conformal_rank(n: int, level: float) -> int:
    """``ceil((n + 1) * level)``, robust to representation error in ``level``."""
    x = (n + 1) * level
    nearest = round(x)
    if abs(x - nearest) <= _RANK_RTOL * max(1.0, abs(x)):
        return int(nearest)
    return int(math.ceil(x))


def _check_scores(scores) -> np.ndarray:
    arr = np.asarray(scores, dtype=float).ravel()
    if arr.size == 0:
        raise ValueError("quantile of an empty score list is undefined")
    if np.isnan(arr).any():
        raise ValueError("scores contain NaN")
    return arr


def quantile_at_level(scores, level: float) -> QuantileResult:
    """Empirical quantile at coverage level ``level`` in ``(0, 1]``.

    Same rule as :func:`empirical_quantile` with ``level = 1 - alpha``, but
    accepts ``level == 1`` (which always overflows to ``+inf``). Used where a
    derived level may legitimately hit the boundary.
    """
    arr = _check_scores(scores)
    if not 0.0 < level <= 1.0:
        raise ValueError(f"quantile level must lie in (0, 1], got {level!r}")
    n = arr.size
    k = max(conformal_rank(n, level), 1)
    if k > n:
        return QuantileResult(INF, k, level, n)
    # kind="stable" keeps tie order deterministic; only the value matters here.
    value = float(np.sort(arr, kind="stable")[k - 1])
    return QuantileResult(value, k, level, n)


def empirical_quantile(scores, alpha: float) -> QuantileResult:
    """Split-conformal ``(1 - alpha)`` quantile of ``scores``.

    Parameters
    ----------
    scores : array_like
        Non-empty collection of real scores.
    alpha : float
        Miscoverage level in ``(0, 1)``.

    Returns
    -------
    QuantileResult
        ``value`` is the ``ceil((n+1)(1-alpha))``-th smallest score, or
        ``+inf`` when that rank exceeds ``n``.

    Examples
    --------
    >>> empirical_quantile(range(1, 10), 0.1).value
    9.0
    >>> empirical_quantile([1, 2, 3], 0.1).value
    inf
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    return quantile_at_level(scores, 1.0 - alpha)


def _robust_rank(m: int, alpha_tilde: float) -> int:
    if not 0.0 <= alpha_tilde < 1.0:
        raise ValueError(f"alpha_tilde must lie in [0, 1), got {alpha_tilde!r}")
    return min(max(conformal_rank(m, 1.0 - alpha_tilde), 1), m)


def robust_quantile(sample_scores, alpha_tilde: float) -> QuantileResult:
    """Inner ``(1 - alpha_tilde)`` quantile over one example's perturbation scores.

    The rank ``ceil((m+1)(1-alpha_tilde))`` is clamped to ``m``, so the result is
    always a finite order statistic and ``alpha_tilde = 0`` yields the maximum.
    """
    arr = _check_scores(sample_scores)
    m = arr.size
    k = _robust_rank(m, alpha_tilde)
    value = float(np.sort(arr, kind="stable")[k - 1])
    return QuantileResult(value, k, 1.0 - alpha_tilde, m)


def robust_quantiles(score_matrix, alpha_tilde: float) -> np.ndarray:
    """Row-wise :func:`robust_quantile` for an ``(n, m)`` score matrix."""
    S = np.asarray(score_matrix, dtype=float)
    if S.ndim != 2 or S.shape[1] == 0:
        raise ValueError(f"expected a non-empty (n, m) score matrix, got shape {S.shape}")
    k = _robust_rank(S.shape[1], alpha_tilde)
    return np.partition(S, k - 1, axis=1)[:, k - 1].copy()


def concentration_half_width(n: int, alpha: float, delta: float) -> ConcentrationBand:
    """Half-width ``sqrt(3 (1-alpha) ln(2/delta) / n)`` of the quantile sandwich.

    With probability at least ``1 - delta`` over ``n`` i.i.d. draws,
    ``Q_hat(alpha + w) <= Q(alpha) <= Q_hat(alpha - w)`` where ``w`` is the
    returned half-width.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n!r}")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    if not 0.0 < delta < 1.0:
        raise ValueError(f"delta must lie in (0, 1), got {delta!r}")
    w = math.sqrt(3.0 * (1.0 - alpha) * math.log(2.0 / delta) / n)
    return ConcentrationBand(w, n, alpha, delta)


@dataclass(frozen=True)
class ConcentrationCheck:
    n: int
    alpha: float
    delta: float
    trials: int
    seed: int
    half_width: float
    contained: int
    min_rate: float

    @property
    def rate(self) -> float:
        return self.contained / self.trials

    @property
    def passed(self) -> bool:
        return self.rate >= self.min_rate


def _sandwich_holds(sample: np.ndarray, alpha: float, w: float, true_q: float) -> bool:
    # Levels outside (0, 1] are clamped: below 0 the lower side is the smallest
    # rank, at or above 1 the upper side overflows to +inf.
    lo_level = 1.0 - (alpha + w)
    hi_level = 1.0 - (alpha - w)
    lower = quantile_at_level(sample, lo_level).value if lo_level > 0 else -INF
    upper = quantile_at_level(sample, min(hi_level, 1.0)).value
    return lower <= true_q <= upper


def concentration_check(
    n: int,
    alpha: float,
    delta: float,
    trials: int,
    seed: int = 0,
    min_rate: float | None = None,
) -> ConcentrationCheck:
    """Monte-Carlo check of the quantile sandwich on standard normal samples.

    Each trial draws ``n`` values, forms the empirical quantiles at
    ``alpha +/- half_width`` and records whether the true quantile
    ``Phi^{-1}(1 - alpha)`` lies between them. ``min_rate`` defaults to
    ``1 - delta`` minus three binomial standard errors.
    """
    if trials < 1:
        raise ValueError(f"trials must be >= 1, got {trials!r}")
    band = concentration_half_width(n, alpha, delta)
    true_q = float(stats.norm.ppf(1.0 - alpha))
    contained = 0
    for t in range(trials):
        sample = rng_for(seed, t).standard_normal(n)
        contained += _sandwich_holds(sample, alpha, band.half_width, true_q)
    if min_rate is None:
        min_rate = 1.0 - delta - 3.0 * math.sqrt(delta * (1.0 - delta) / trials)
    return ConcentrationCheck(
        n=n,
        alpha=alpha,
        delta=delta,
        trials=trials,
        seed=seed,
        half_width=band.half_width,
        contained=int(contained),
        min_rate=min_rate,
    )
