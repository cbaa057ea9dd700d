"""Non-conformity scores for classification.

``hps`` is one minus the probability of the candidate label. ``aps`` is the
probability mass of strictly more likely labels plus ``u`` times the
candidate's own mass, with ``u ~ U[0, 1]``. Ties never count toward the
strictly-greater mass.

Scalar functions validate their input; the ``*_scores`` helpers operate on
``(N, C)`` probability arrays and assume the caller already did.
"""

from __future__ import annotations

from typing import Literal

import numpy as np

from ._rng import SeedLike, as_generator

ScoreKind = Literal["hps", "aps"]
SCORE_KINDS: tuple[str, ...] = ("hps", "aps")

PROB_TOL = 1e-6
RENORM_TOL = 1e-4

# Rows of an (N, C, C) comparison tensor processed per block in all-label APS.
_APS_BLOCK = 8192


def check_score_kind(kind: str) -> str:
    kind = str(kind).lower()
    if kind not in SCORE_KINDS:
        raise ValueError(f"unknown score kind {kind!r}; expected one of {SCORE_KINDS}")
    return kind


def check_probs(p) -> np.ndarray:
    """Validate a probability vector, or an ``(N, C)`` array of them.

    Entries must lie in ``[0, 1]``. A row whose sum is off by more than
    ``PROB_TOL`` but at most ``RENORM_TOL`` is renormalized; beyond that it is
    rejected.
    """
    arr = np.array(p, dtype=float)
    if arr.ndim not in (1, 2) or arr.shape[-1] == 0:
        raise ValueError(f"expected a non-empty probability vector or table, got shape {arr.shape}")
    if not np.isfinite(arr).all():
        raise ValueError("probabilities must be finite")
    if (arr < 0).any() or (arr > 1).any():
        raise ValueError("probabilities must lie in [0, 1]")
    sums = arr.sum(axis=-1, keepdims=True)
    dev = np.abs(sums - 1.0)
    if (dev > RENORM_TOL).any():
        bad = np.flatnonzero(dev.ravel() > RENORM_TOL)
        raise ValueError(
            f"probabilities do not sum to 1 (rows {bad[:10].tolist()}, sums {sums.ravel()[bad[:10]].tolist()})"
        )
    fix = dev > PROB_TOL
    if fix.any():
        arr = np.where(fix, arr / sums, arr)
    return arr


def _check_label(y, n_classes: int) -> int:
    if isinstance(y, (bool, np.bool_)) or int(y) != y:
        raise ValueError(f"label must be an integer, got {y!r}")
    y = int(y)
    if not 0 <= y < n_classes:
        raise ValueError(f"label {y} out of range for {n_classes} classes")
    return y


def hps_score(p, y: int) -> float:
    """``1 - p[y]``.

    >>> round(hps_score([0.7, 0.2, 0.1], 0), 12)
    0.3
    """
    p = check_probs(p)
    if p.ndim != 1:
        raise ValueError("hps_score expects a single probability vector")
    y = _check_label(y, p.size)
    return float(1.0 - p[y])


def aps_score(p, y: int, u: float) -> float:
    """Strictly-greater mass plus ``u * p[y]``.

    >>> round(aps_score([0.5, 0.3, 0.2], 1, 1.0), 12)
    0.8
    """
    p = check_probs(p)
    if p.ndim != 1:
        raise ValueError("aps_score expects a single probability vector")
    y = _check_label(y, p.size)
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u!r}")
    py = p[y]
    return float(p[p > py].sum() + u * py)


def hps_scores(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    return 1.0 - probs[np.arange(probs.shape[0]), np.asarray(labels, dtype=np.intp)]


def aps_scores(probs: np.ndarray, labels: np.ndarray, u: np.ndarray) -> np.ndarray:
    probs = np.asarray(probs, dtype=float)
    py = probs[np.arange(probs.shape[0]), np.asarray(labels, dtype=np.intp)]
    greater = np.where(probs > py[:, None], probs, 0.0).sum(axis=1)
    return greater + np.asarray(u, dtype=float) * py


def label_scores(probs: np.ndarray, labels: np.ndarray, kind: str, u: np.ndarray | None = None) -> np.ndarray:
    """Score of ``labels[i]`` under ``probs[i]`` for every row."""
    kind = check_score_kind(kind)
    if kind == "hps":
        return hps_scores(probs, labels)
    if u is None:
        raise ValueError("APS scores need one uniform draw per row")
    return aps_scores(probs, labels, u)


def all_label_scores(probs: np.ndarray, kind: str, u: np.ndarray | None = None) -> np.ndarray:
    """``(N, C)`` matrix of scores for every candidate label.

    For APS the same ``u[i]`` is used for all labels of row ``i``, which keeps
    prediction sets nested in the threshold.
    """
    kind = check_score_kind(kind)
    probs = np.asarray(probs, dtype=float)
    if kind == "hps":
        return 1.0 - probs
    if u is None:
        raise ValueError("APS scores need one uniform draw per row")
    u = np.asarray(u, dtype=float)
    out = np.empty_like(probs)
    for start in range(0, probs.shape[0], _APS_BLOCK):
        blk = probs[start : start + _APS_BLOCK]
        # greater[i, y] = sum_k blk[i, k] * [blk[i, k] > blk[i, y]]
        mask = blk[:, None, :] > blk[:, :, None]
        greater = np.einsum("iyk,ik->iy", mask, blk)
        out[start : start + _APS_BLOCK] = greater + u[start : start + _APS_BLOCK, None] * blk
    return out


def score_batch(probs, labels, score_kind: str = "hps", rng_seed: SeedLike = None) -> np.ndarray:
    """Score every row of a probability table against its label.

    APS draws one uniform ``u`` per row from ``rng_seed``; repeated calls with
    the same integer seed give identical output.
    """
    kind = check_score_kind(score_kind)
    labels = np.asarray(labels, dtype=np.intp).ravel()
    probs = np.asarray(probs, dtype=float)
    if probs.size == 0 and labels.size == 0:
        return np.empty(0)
    probs = check_probs(probs)
    if probs.ndim != 2:
        probs = probs[None, :]
    if probs.shape[0] != labels.size:
        raise ValueError(f"{probs.shape[0]} probability rows but {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError("label out of range")
    u = as_generator(rng_seed).random(labels.size) if kind == "aps" else None
    return label_scores(probs, labels, kind, u)
