"""Perturbation samplers over an l2 ball of radius ``r``.

Three schemes are available:

``uniform``
    Uniform in the ball: isotropic direction, radius ``r * U**(1/d)``.
``shell``
    ``K`` equally spaced radii ``k * r / K``; ``per_radius`` isotropic draws
    of exactly that norm at each radius.
``gaussian``
    ``N(0, sigma^2 I)`` truncated to the ball. The truncated radial law is
    sampled by inverse CDF of the chi distribution, which is distributionally
    identical to rejection sampling without its cost when acceptance is low.
    Only an in-ball mass that underflows to zero is rejected.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from ._rng import SeedLike, as_generator

NOISE_KINDS: tuple[str, ...] = ("uniform", "shell", "gaussian")


@dataclass(frozen=True)
class PerturbationBudget:
    radius: float
    dim: int
    norm_order: int = 2

    def __post_init__(self):
        if not self.radius >= 0:
            raise ValueError(f"radius must be >= 0, got {self.radius!r}")
        if int(self.dim) != self.dim or self.dim < 1:
            raise ValueError(f"dim must be a positive integer, got {self.dim!r}")
        if self.norm_order != 2:
            raise NotImplementedError("only l2 budgets are supported")

    def project(self, eps: np.ndarray) -> np.ndarray:
        """Scale rows of ``eps`` back into the ball (no-op for rows inside)."""
        eps = np.asarray(eps, dtype=float)
        norms = np.linalg.norm(eps, axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(norms > self.radius, self.radius / norms, 1.0)
        return eps * scale


@dataclass(frozen=True)
class NoiseScheme:
    kind: str = "uniform"
    shells: int | None = None
    per_radius: int = 2
    sigma: float | None = None

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"unknown noise kind {self.kind!r}; expected one of {NOISE_KINDS}")
        if self.kind == "shell":
            if self.shells is not None and self.shells < 1:
                raise ValueError("shell count must be >= 1")
            if self.per_radius < 1:
                raise ValueError("per_radius must be >= 1")
        if self.kind == "gaussian" and not (self.sigma is not None and self.sigma > 0):
            raise ValueError("gaussian noise needs sigma > 0")

    def shell_layout(self, count: int) -> tuple[int, int]:
        """``(K, per_radius)`` producing exactly ``count`` draws."""
        if self.shells is not None:
            if count % self.shells:
                raise ValueError(f"{count} draws cannot be split evenly over {self.shells} shells")
            return self.shells, count // self.shells
        if count % self.per_radius:
            raise ValueError(f"{count} draws is not a multiple of per_radius={self.per_radius}")
        return count // self.per_radius, self.per_radius

    def sample(self, budget: PerturbationBudget, count: int, seed: SeedLike = None) -> np.ndarray:
        if self.kind == "uniform":
            return sample_uniform_ball(budget, count, seed)
        if self.kind == "shell":
            if count == 0:
                return np.zeros((0, budget.dim))
            k, per = self.shell_layout(count)
            return sample_shell_scheme(budget, k, per, seed)
        return sample_gaussian_ball(budget, self.sigma, count, seed)

    def describe(self) -> dict:
        out: dict = {"kind": self.kind}
        if self.kind == "shell":
            out["shells"] = self.shells
            out["per_radius"] = self.per_radius
        if self.kind == "gaussian":
            out["sigma"] = self.sigma
        return out


def _directions(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    g = rng.standard_normal((count, dim))
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    # A zero Gaussian vector has probability zero; replace defensively.
    bad = norms[:, 0] == 0
    if bad.any():
        g[bad] = 0.0
        g[bad, 0] = 1.0
        norms[bad] = 1.0
    return g / norms


def sample_uniform_ball(budget: PerturbationBudget, count: int, seed: SeedLike = None) -> np.ndarray:
    """``count`` points uniform in the l2 ball, shape ``(count, dim)``."""
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = as_generator(seed)
    d = budget.dim
    dirs = _directions(rng, count, d)
    radii = budget.radius * rng.random(count) ** (1.0 / d)
    return budget.project(dirs * radii[:, None])


def sample_shell_scheme(
    budget: PerturbationBudget, shells: int, per_radius: int, seed: SeedLike = None
) -> np.ndarray:
    """``shells * per_radius`` points on equally spaced spheres.

    Rows are grouped by radius in ascending order: the first ``per_radius`` rows
    have norm ``r / K``, the last ``per_radius`` have norm ``r``.
    """
    if shells < 1 or per_radius < 1:
        raise ValueError("shells and per_radius must be >= 1")
    rng = as_generator(seed)
    radii = np.repeat(budget.radius * np.arange(1, shells + 1) / shells, per_radius)
    return _directions(rng, radii.size, budget.dim) * radii[:, None]


def gaussian_acceptance(budget: PerturbationBudget, sigma: float) -> float:
    """Probability that an ``N(0, sigma^2 I)`` draw falls inside the ball."""
    if budget.radius == 0:
        return 0.0
    return float(stats.chi2.cdf((budget.radius / sigma) ** 2, df=budget.dim))


def sample_gaussian_ball(
    budget: PerturbationBudget, sigma: float, count: int, seed: SeedLike = None
) -> np.ndarray:
    """``count`` draws of ``N(0, sigma^2 I)`` conditioned on ``||eps|| <= r``."""
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma!r}")
    if count < 0:
        raise ValueError("count must be >= 0")
    d = budget.dim
    if budget.radius == 0:
        return np.zeros((count, d))
    acc = gaussian_acceptance(budget, sigma)
    if not acc > 0:
        raise ValueError(
            f"gaussian noise sigma={sigma} has no representable mass inside radius "
            f"{budget.radius} in dim {d}; reduce sigma"
        )
    rng = as_generator(seed)
    dirs = _directions(rng, count, d)
    u = rng.random(count)
    if acc == 1.0:
        # Whole mass inside the ball (tiny sigma): plain chi draw.
        q = stats.chi2.ppf(u, df=d)
    else:
        q = stats.chi2.ppf(u * acc, df=d)
    radii = np.minimum(sigma * np.sqrt(q), budget.radius)
    return budget.project(dirs * radii[:, None])
