"""Empirical distributions, goodness-of-fit, and convergence-trend checks."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


def dkw_halfwidth(n: int, delta: float = 0.01) -> float:
    """Distribution-free confidence band half-width sqrt(ln(2/delta)/(2n))."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return math.sqrt(math.log(2.0 / delta) / (2.0 * n))


@dataclass
class Ecdf:
    """Right-continuous empirical CDF with an optional DKW band."""

    values: np.ndarray
    delta: float = 0.01

    def __init__(self, sample, delta: float = 0.01):
        sample = np.asarray(sample, dtype=float)
        if sample.size == 0:
            raise ValueError("empty sample")
        self.values = np.sort(sample)
        self.delta = delta

    @property
    def n(self) -> int:
        return len(self.values)

    @property
    def band_halfwidth(self) -> float:
        return dkw_halfwidth(self.n, self.delta)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.searchsorted(self.values, x, side="right") / self.n
        return out if out.ndim else float(out)


def ks_distance(ecdf: Ecdf, reference) -> float:
    """sup |F_hat - F_ref| evaluated at both one-sided limits of each jump.

    ``reference`` is a callable CDF or a second Ecdf; evaluation points are
    the sample points of ``ecdf`` (and of the reference when it is also
    empirical), which is where the sup of a step-versus-cadlag difference
    is attained.
    """
    pts = ecdf.values
    if isinstance(reference, Ecdf):
        pts = np.concatenate([pts, reference.values])
    pts = np.unique(pts)
    f_hat_right = ecdf(pts)
    f_hat_left = (np.searchsorted(ecdf.values, pts, side="left")) / ecdf.n
    f_ref = reference(pts) if callable(reference) else reference
    f_ref = np.asarray(f_ref, dtype=float)
    return float(np.max(np.maximum(np.abs(f_hat_right - f_ref),
                                   np.abs(f_hat_left - f_ref))))


def tail_index_fit(abscissae, survival_counts, n_total: int):
    """OLS slope of log survival against log n, with its standard error.

    Zero-count abscissae are dropped; at least five positive points are
    required.  Returns (slope, stderr).
    """
    x = np.asarray(abscissae, dtype=float)
    c = np.asarray(survival_counts, dtype=float)
    keep = c > 0
    if keep.sum() < 5:
        raise ValueError("need >= 5 abscissae with positive survival counts")
    lx = np.log(x[keep])
    ly = np.log(c[keep] / n_total)
    if np.allclose(lx, lx[0]):
        raise ValueError("degenerate abscissae")
    A = np.vstack([lx, np.ones_like(lx)]).T
    coef, res, *_ = np.linalg.lstsq(A, ly, rcond=None)
    slope = float(coef[0])
    dof = max(len(lx) - 2, 1)
    s2 = float(res[0]) / dof if len(res) else 0.0
    sxx = float(np.sum((lx - lx.mean()) ** 2))
    stderr = math.sqrt(s2 / sxx) if sxx > 0 else math.inf
    return slope, stderr


def trend_monotone(values: Sequence[float],
                   halfwidths: Sequence[float] | None = None) -> bool:
    """Pass iff point estimates are nonincreasing or consecutive CIs overlap.

    Realizes "tends to 0" claims at finite scale: a rise between
    consecutive points only fails the check when their confidence
    intervals are disjoint.
    """
    v = np.asarray(values, dtype=float)
    if len(v) < 3:
        raise ValueError("need >= 3 ladder points")
    h = np.zeros_like(v) if halfwidths is None else np.asarray(halfwidths, dtype=float)
    for i in range(1, len(v)):
        if v[i] > v[i - 1] and (v[i] - h[i]) > (v[i - 1] + h[i - 1]):
            return False
    return True


@dataclass
class ReportRow:
    """One acceptance-report line (CSV/JSON serializable)."""

    scenario: str
    theorem: str
    n: int
    k: int
    r: int
    t: float
    accepted: int
    statistic: str
    value: float
    ci_low: float
    ci_high: float
    reference: float
    passed: bool

    FIELDS = ("scenario", "theorem", "n", "k", "r", "t", "accepted",
              "statistic", "value", "ci_low", "ci_high", "reference", "pass")

    def as_csv(self) -> str:
        return ",".join([self.scenario, self.theorem, str(self.n), str(self.k),
                         str(self.r), repr(self.t), str(self.accepted),
                         self.statistic, repr(self.value), repr(self.ci_low),
                         repr(self.ci_high), repr(self.reference),
                         str(self.passed).lower()])

    def as_dict(self) -> dict:
        return {"scenario": self.scenario, "theorem": self.theorem, "n": self.n,
                "k": self.k, "r": self.r, "t": self.t, "accepted": self.accepted,
                "statistic": self.statistic, "value": self.value,
                "ci_low": self.ci_low, "ci_high": self.ci_high,
                "reference": self.reference, "pass": self.passed}


def quantile_ci(sample: np.ndarray, q: float, delta: float = 0.01):
    """(estimate, lo, hi) for a quantile via the DKW band on the CDF."""
    sample = np.sort(np.asarray(sample, dtype=float))
    n = len(sample)
    h = dkw_halfwidth(n, delta)
    est = float(np.quantile(sample, q))
    lo = float(np.quantile(sample, max(q - h, 0.0)))
    hi = float(np.quantile(sample, min(q + h, 1.0)))
    return est, lo, hi
