"""Independent reference implementations used only by the tests."""

import math
from fractions import Fraction

import numpy as np


def exact_rank(count, alpha):
    """``ceil((count+1)(1-alpha))`` on the decimal value of ``alpha``.

    A rank within 1e-9 (relative) of an integer is taken as that integer, so
    ``alpha=1/3`` typed as 0.3333333333333333 behaves like one third.
    """
    x = (count + 1) * (1 - Fraction(str(alpha)))
    nearest = round(x)
    if abs(x - nearest) <= Fraction(1, 10**9) * max(1, abs(x)):
        return int(nearest)
    return math.ceil(x)


def naive_quantile(scores, alpha):
    """Sort-and-index split-conformal quantile."""
    s = sorted(float(v) for v in scores)
    k = exact_rank(len(s), alpha)
    return math.inf if k > len(s) else s[k - 1]


def naive_robust_quantile(scores, alpha_tilde):
    s = sorted(float(v) for v in scores)
    k = min(max(exact_rank(len(s), alpha_tilde), 1), len(s))
    return s[k - 1]


def naive_hps(p, y):
    return 1.0 - p[y]


def naive_aps(p, y, u):
    return sum(p[k] for k in range(len(p)) if p[k] > p[y]) + u * p[y]


def naive_set(p, tau, kind, u=None):
    out = set()
    for k in range(len(p)):
        s = naive_hps(p, k) if kind == "hps" else naive_aps(p, k, u)
        if s <= tau:
            out.add(k)
    return out


def softmax(z):
    z = np.asarray(z, dtype=float)
    e = np.exp(z - z.max())
    return e / e.sum()
