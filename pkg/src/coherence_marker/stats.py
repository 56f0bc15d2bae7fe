"""Nonparametric and parametric two-sample tests used by the analytics.

Everything here is pure Python/numpy so p-values are exactly reproducible
and testable against brute-force enumeration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

ALTERNATIVES = ("two-sided", "greater", "less")
MW_MODES = ("exact", "normal_approx", "auto")

# exact permutation distribution is used by ``auto`` up to this total size
AUTO_EXACT_MAX_N = 30


@dataclass(frozen=True)
class TestResult:
    __test__ = False  # keep pytest from collecting this class

    statistic: float
    p_value: float
    method: str
    n1: int
    n2: int
    df: float | None = None
    degenerate: bool = False


@dataclass(frozen=True)
class Description:
    mean: float
    std: float
    n: int
    degenerate: bool = False

    def fmt(self, digits: int = 3) -> str:
        return f"{self.mean:.{digits}f} ({self.std:.{digits}f})"


def _as_sample(values: Iterable[float], name: str) -> np.ndarray:
    arr = np.asarray(list(values), dtype=float)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError(f"sample {name!r} must be a non-empty 1-d sequence")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"sample {name!r} contains non-finite values")
    return arr


def rankdata(values: Sequence[float]) -> np.ndarray:
    """1-based ranks; tied values share the mean of the ranks they span."""
    arr = np.asarray(values, dtype=float)
    order = np.argsort(arr, kind="mergesort")
    ranks = np.empty(arr.size, dtype=float)
    sorted_vals = arr[order]
    i = 0
    while i < arr.size:
        j = i
        while j + 1 < arr.size and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def _rank_sum_distribution(doubled_ranks: Sequence[int], n1: int) -> np.ndarray:
    """Counts of size-``n1`` subsets by their doubled rank sum.

    Index ``s`` of the result holds the number of subsets whose doubled ranks
    add up to ``s``. Counts are Python ints so they stay exact.
    """
    total = int(sum(doubled_ranks))
    dp = [np.zeros(total + 1, dtype=object) for _ in range(n1 + 1)]
    for row in dp:
        row[:] = 0
    dp[0][0] = 1
    for seen, w in enumerate(doubled_ranks):
        for c in range(min(seen + 1, n1), 0, -1):
            dp[c][w:] = dp[c][w:] + dp[c - 1][: total + 1 - w]
    return dp[n1]


def _exact_p(doubled_ranks: Sequence[int], n1: int, observed: int, alternative: str) -> float:
    counts = _rank_sum_distribution(doubled_ranks, n1)
    n = len(doubled_ranks)
    centre = n1 * (n + 1)  # mean of the doubled rank sum
    sums = np.arange(counts.size)
    if alternative == "two-sided":
        mask = np.abs(sums - centre) >= abs(observed - centre)
    elif alternative == "greater":
        mask = sums >= observed
    else:
        mask = sums <= observed
    hits = int(sum(counts[mask]))
    return min(1.0, hits / math.comb(n, n1))


def mann_whitney(
    a: Iterable[float],
    b: Iterable[float],
    mode: str = "auto",
    alternative: str = "two-sided",
) -> TestResult:
    """Mann-Whitney U test; ``statistic`` is U for sample ``a``.

    ``exact`` evaluates the permutation distribution of the rank sum over all
    C(n1+n2, n1) label assignments (ties keep their midranks), counted by
    dynamic programming. ``normal_approx`` uses the tie-corrected variance and
    a 0.5 continuity correction. ``alternative="greater"`` tests whether ``a``
    tends to exceed ``b``.
    """
    if mode not in MW_MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MW_MODES}")
    if alternative not in ALTERNATIVES:
        raise ValueError(f"unknown alternative {alternative!r}")
    x = _as_sample(a, "a")
    y = _as_sample(b, "b")
    n1, n2 = x.size, y.size
    n = n1 + n2
    ranks = rankdata(np.concatenate([x, y]))
    rank_sum = float(ranks[:n1].sum())
    u = rank_sum - n1 * (n1 + 1) / 2.0

    if np.all(ranks == ranks[0]):
        return TestResult(u, 1.0, f"mann_whitney:{mode}", n1, n2, degenerate=True)

    if mode == "auto":
        mode = "exact" if n <= AUTO_EXACT_MAX_N else "normal_approx"

    if mode == "exact":
        doubled = [int(round(2 * r)) for r in ranks]
        p = _exact_p(doubled, n1, int(round(2 * rank_sum)), alternative)
        return TestResult(u, p, "mann_whitney:exact", n1, n2)

    _, tie_counts = np.unique(ranks, return_counts=True)
    tie_term = float(np.sum(tie_counts.astype(float) ** 3 - tie_counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    sd = math.sqrt(var)
    mu = n1 * n2 / 2.0
    if alternative == "two-sided":
        z = (abs(u - mu) - 0.5) / sd
        p = min(1.0, 2.0 * normal_sf(z))
    elif alternative == "greater":
        p = normal_sf((u - mu - 0.5) / sd)
    else:
        p = normal_sf((mu - u - 0.5) / sd)
    return TestResult(u, min(1.0, max(0.0, p)), "mann_whitney:normal_approx", n1, n2)


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 3e-16) -> float:
    # modified Lentz evaluation of the incomplete-beta continued fraction
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """P(T > t) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return tail if t > 0 else 1.0 - tail


def t_test(a: Iterable[float], b: Iterable[float], alternative: str = "two-sided") -> TestResult:
    """Welch's unequal-variance two-sample t-test."""
    if alternative not in ALTERNATIVES:
        raise ValueError(f"unknown alternative {alternative!r}")
    x = _as_sample(a, "a")
    y = _as_sample(b, "b")
    if x.size < 2 or y.size < 2:
        raise ValueError("t_test needs at least 2 observations per sample")
    n1, n2 = x.size, y.size
    diff = float(x.mean() - y.mean())
    va = float(x.var(ddof=1)) / n1
    vb = float(y.var(ddof=1)) / n2
    se2 = va + vb
    if se2 == 0.0:
        if diff == 0.0:
            return TestResult(0.0, 1.0, "welch_t", n1, n2, degenerate=True)
        t = math.copysign(math.inf, diff)
        p = 0.0 if alternative == "two-sided" or (alternative == "greater") == (t > 0) else 1.0
        return TestResult(t, p, "welch_t", n1, n2, degenerate=True)
    t = diff / math.sqrt(se2)
    df = se2**2 / (va**2 / (n1 - 1) + vb**2 / (n2 - 1))
    if alternative == "two-sided":
        p = min(1.0, 2.0 * student_t_sf(abs(t), df))
    elif alternative == "greater":
        p = student_t_sf(t, df)
    else:
        p = student_t_sf(-t, df)
    return TestResult(t, p, "welch_t", n1, n2, df=df)


def describe(values: Iterable[float], ddof: int = 1) -> Description:
    """Mean and standard deviation (sample std by default, ``ddof=0`` for population).

    Uses Welford's single-pass update.
    """
    if ddof not in (0, 1):
        raise ValueError("ddof must be 0 (population) or 1 (sample)")
    n = 0
    mean = 0.0
    m2 = 0.0
    for v in values:
        v = float(v)
        n += 1
        delta = v - mean
        mean += delta / n
        m2 += delta * (v - mean)
    if n == 0:
        raise ValueError("cannot describe an empty sample")
    if n - ddof <= 0:
        return Description(mean, 0.0, n, degenerate=True)
    return Description(mean, math.sqrt(m2 / (n - ddof)), n)
