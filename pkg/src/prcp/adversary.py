"""White-box worst-case perturbation search for the linear-softmax model.

The objective is the HPS score of the true label, ``1 - p_y(x + eps)``, over
the l2 ball. APS is attacked through this same surrogate because its sorted
structure has no useful gradient.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._rng import SeedLike, as_generator
from .classifier import SyntheticSoftmaxClassifier
from .noise import PerturbationBudget, sample_uniform_ball
from .scores import check_score_kind


@dataclass(frozen=True)
class AttackConfig:
    budget: PerturbationBudget
    steps: int = 100
    step_size: float | None = None
    restarts: int = 5

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ValueError("step_size must be > 0")

    @property
    def effective_step(self) -> float:
        return self.step_size if self.step_size is not None else 2.5 * self.budget.radius / self.steps


def _hps(clf: SyntheticSoftmaxClassifier, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    p = clf.predict_proba(x)
    return 1.0 - np.take_along_axis(p, y[..., None], axis=-1)[..., 0]


def worst_case_batch(
    clf: SyntheticSoftmaxClassifier,
    x,
    y,
    cfg: AttackConfig,
    seed: SeedLike = None,
    score_kind: str = "hps",
) -> tuple[np.ndarray, np.ndarray]:
    """Projected normalized-gradient ascent for every row of ``x``.

    Restart 0 starts from ``eps = 0``; the others start uniformly in the ball.
    Every iterate is scored and the best one per row is kept, so the returned
    score never falls below the clean score.

    Returns
    -------
    eps : ndarray, shape (N, d)
    score : ndarray, shape (N,)
        HPS score of the true label at ``x + eps``.
    """
    check_score_kind(score_kind)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=np.intp))
    n, d = x.shape
    budget = cfg.budget
    if budget.dim != d or clf.dim != d:
        raise ValueError("budget, classifier and input dimensions disagree")
    rng = as_generator(seed)

    R = cfg.restarts
    eps = np.zeros((R, n, d))
    if R > 1:
        eps[1:] = sample_uniform_ball(budget, (R - 1) * n, rng).reshape(R - 1, n, d)
    yy = np.broadcast_to(y, (R, n))
    best_eps = np.zeros((n, d))
    best = _hps(clf, x, y)
    if budget.radius == 0:
        return best_eps, best

    step = cfg.effective_step
    for t in range(cfg.steps + 1):
        score = _hps(clf, x[None] + eps, yy)
        better = score > best[None]
        if better.any():
            # Pick the restart with the highest score per row.
            r_idx = np.argmax(np.where(better, score, -np.inf), axis=0)
            rows = better.any(axis=0)
            best[rows] = score[r_idx[rows], np.flatnonzero(rows)]
            best_eps[rows] = eps[r_idx[rows], np.flatnonzero(rows)]
        if t == cfg.steps:
            break
        _, grad_p = clf.true_prob_grad(x[None] + eps, yy)
        g = -grad_p
        gn = np.linalg.norm(g, axis=-1, keepdims=True)
        g = np.divide(g, gn, out=np.zeros_like(g), where=gn > 0)
        eps = budget.project(eps + step * g)
    return best_eps, best


def worst_case_perturbation(
    clf: SyntheticSoftmaxClassifier,
    x,
    y: int,
    cfg: AttackConfig,
    seed: SeedLike = None,
    score_kind: str = "hps",
) -> tuple[np.ndarray, float]:
    eps, score = worst_case_batch(clf, np.asarray(x, dtype=float)[None], [y], cfg, seed, score_kind)
    return eps[0], float(score[0])


def polar_grid(budget: PerturbationBudget, resolution: int) -> np.ndarray:
    """Closed-ball grid: ``resolution`` radii in ``[0, r]`` times angular points.

    d=1 uses ``2 * resolution`` points on ``[-r, r]``; d=2 uses ``resolution``
    angles per radius (``resolution**2`` points); d=3 uses a ``resolution x
    resolution`` polar/azimuth grid per radius.
    """
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    r = budget.radius
    d = budget.dim
    radii = np.linspace(0.0, r, resolution)
    if d == 1:
        return np.linspace(-r, r, 2 * resolution)[:, None]
    if d == 2:
        th = np.linspace(0.0, 2 * np.pi, resolution, endpoint=False)
        pts = radii[:, None, None] * np.stack([np.cos(th), np.sin(th)], axis=-1)[None]
        return pts.reshape(-1, 2)
    if d == 3:
        th = np.linspace(0.0, np.pi, resolution)
        ph = np.linspace(0.0, 2 * np.pi, resolution, endpoint=False)
        T, P = np.meshgrid(th, ph, indexing="ij")
        dirs = np.stack([np.sin(T) * np.cos(P), np.sin(T) * np.sin(P), np.cos(T)], axis=-1).reshape(-1, 3)
        return (radii[:, None, None] * dirs[None]).reshape(-1, 3)
    raise ValueError(f"brute-force search supports d <= 3, got d={d}")


def brute_force_worst(
    clf: SyntheticSoftmaxClassifier,
    x,
    y: int,
    budget: PerturbationBudget,
    grid_resolution: int = 100,
    score_kind: str = "hps",
) -> tuple[np.ndarray, float]:
    """Exhaustive grid maximum of the HPS score over the closed ball (d <= 3)."""
    check_score_kind(score_kind)
    if budget.dim > 3:
        raise ValueError(f"brute-force search supports d <= 3, got d={budget.dim}")
    grid = polar_grid(budget, grid_resolution)
    scores = _hps(clf, np.asarray(x, dtype=float)[None] + grid, np.full(grid.shape[0], int(y)))
    k = int(np.argmax(scores))
    return grid[k].copy(), float(scores[k])
