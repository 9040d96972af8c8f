"""Numerical evaluation of the conditional limit laws.

Each evaluator returns values in [0, 1] built from two reusable Monte
Carlo artifacts: a :class:`~reduced_bpre.stable.PathEnsemble` holding the
joint empirical law of (min over [0,1], endpoint) of the scaled stable
path, and a :class:`~reduced_bpre.stable.MeanderTable` holding the
estimated meander density at time 1.  Quadratures against the empirical
joint law use Gauss-Legendre nodes; a single shared ensemble serves every
argument so that monotonicity in the argument is not polluted by
independent noise.

Laws covered:

- running-minimum law  Q(z) = P(min_{[0,1]} Y <= z)  (z <= 0)
- the two-sided window law
  A(T, y) = (ar+1)/T^{ar+1} * Integral_0^inf w^{ar}
            P(-w <= min <= y - w, Y1 <= T - w) dw,  ar = alpha rho
- the meander-moment normalizer C** and partial moment C** H(y)
- the double-quadrature law W(t, y) with its endpoint singularity removed
  by the substitution u = q^{alpha(1-rho)}
- the closed form 1 - (1 - (t and y)/t)^{ar+1}
- the shifted variant A2(t, theta, z) and the meander running-infimum law
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr  # standard normal CDF, vectorized

from .stable import (InsufficientAcceptance, MeanderTable, PathEnsemble,
                     StableSpec, norming, sample_increment)

LAW_IDS = ("Q_min", "A", "W", "H_Cstar", "tail_closed", "A2", "meander_min_after")


@dataclass
class LimitLawTable:
    """Tabulated law values with per-entry error estimates, CSV-exportable."""

    law_id: str
    arg1: np.ndarray
    arg2: np.ndarray
    values: np.ndarray
    errors: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.law_id not in LAW_IDS:
            raise ValueError(f"law_id must be one of {LAW_IDS}")
        v = np.asarray(self.values)
        if np.any((v < -1e-9) | (v > 1.0 + 1e-9)):
            raise ValueError("law values must lie in [0, 1]")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("law_id,arg1,arg2,value,error\n")
        for a1, a2, v, e in zip(self.arg1, self.arg2, self.values, self.errors):
            buf.write(f"{self.law_id},{a1!r},{a2!r},{v!r},{e!r}\n")
        return buf.getvalue()


def _gauss_legendre(a: float, b: float, n: int):
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (b - a) * x + 0.5 * (a + b), 0.5 * (b - a) * w


def q_min(spec: StableSpec, z: float, ensemble: PathEnsemble | None = None) -> float:
    """P(min over [0,1] of the stable path <= z) for z <= 0.

    Closed reflection form 2 Phi(z) in the Gaussian case; otherwise the
    shared path ensemble answers the query.
    """
    if z > 0:
        raise ValueError("q_min is defined for z <= 0")
    if spec.alpha == 2.0:
        return float(2.0 * ndtr(z))
    if ensemble is None:
        raise ValueError("non-Gaussian q_min needs a path ensemble")
    return ensemble.prob_min_le(z)


def q_min_cdf(spec: StableSpec, z, ensemble: PathEnsemble | None = None):
    """Vectorized z -> P(min <= z and 0), valid for every real z."""
    z = np.minimum(np.asarray(z, dtype=float), 0.0)
    if spec.alpha == 2.0:
        return 2.0 * ndtr(z)
    if ensemble is None:
        raise ValueError("non-Gaussian q_min needs a path ensemble")
    return np.asarray([ensemble.prob_min_le(v) for v in np.atleast_1d(z)])


def _w_cut(ensemble: PathEnsemble, shift: float = 0.0, tail: float = 1e-4) -> float:
    """Doubled level beyond which P(min <= -w) drops under ``tail``."""
    q = float(np.quantile(ensemble.mins, tail))
    return shift + 2.0 * max(-q, 1.0)


def a_limit(spec: StableSpec, T: float, y: float, ensemble: PathEnsemble,
            n_nodes: int = 256) -> tuple[float, float]:
    """A(T, y) with its combined quadrature and sampling error estimate."""
    if T <= 0:
        raise ValueError("T must be positive")
    if not 0.0 <= y <= T + 1e-12:
        raise ValueError(f"need 0 <= y <= T, got y={y}, T={T}")
    ar = spec.alpha_rho
    if y == 0.0:
        return 0.0, 0.0
    wcut = _w_cut(ensemble, shift=max(y, T))
    nodes, weights = _gauss_legendre(0.0, wcut, n_nodes)
    mins, ends = ensemble.mins, ensemble.ends
    vals = np.empty(n_nodes)
    for i, w in enumerate(nodes):
        vals[i] = np.mean((mins >= -w) & (mins <= y - w) & (ends <= T - w))
    pref = (ar + 1.0) / T ** (ar + 1.0)
    value = pref * float(np.sum(weights * nodes ** ar * vals))
    err = pref * (wcut ** (ar + 1.0) / (ar + 1.0)) * ensemble.error_halfwidth
    return min(max(value, 0.0), 1.0 + err), err


def cstar_and_h(table: MeanderTable, y: float) -> tuple[float, float]:
    """(C**, C** H(y)) from shared trapezoid quadrature on the meander grid.

    C** = 1 / Integral g+(z) z^{a(1-rho)} dz and H(y) integrates
    g+(z) (z^{a(1-rho)} - (z - y and z)^{a(1-rho)}).  Using the same nodes
    for both makes C** H(inf) = 1 exact.
    """
    if y < 0:
        raise ValueError("y must be >= 0")
    spec = table.spec
    expo = spec.alpha * (1.0 - spec.rho)
    z = table.z_grid
    g = table.density
    denom = float(np.trapezoid(g * z ** expo, z))
    if denom <= 0:
        raise InsufficientAcceptance("meander moment integral vanished")
    cstar = 1.0 / denom
    num = float(np.trapezoid(g * (z ** expo - (z - np.minimum(y, z)) ** expo), z))
    return cstar, min(max(cstar * num, 0.0), 1.0)


def w_limit(spec: StableSpec, t: float, y: float, table: MeanderTable,
            n_inner: int = 64) -> float:
    """W(t, y): the double quadrature over the meander density.

    The second summand's q^{a(1-rho)-1} endpoint blowup is removed by the
    substitution u = q^{a(1-rho)}, after which both inner integrands are
    bounded and Gauss-Legendre applies.
    """
    if t <= 0:
        raise ValueError("t must be positive")
    if not 0.0 <= y <= t + 1e-12:
        raise ValueError(f"need 0 <= y <= t, got y={y}, t={t}")
    if y == 0.0:
        return 0.0
    ar = spec.alpha_rho
    a1r = spec.alpha * (1.0 - spec.rho)
    z = table.z_grid
    g = table.density
    q_lo = np.maximum(z - y, 0.0)
    q_hi = z

    # first summand: integrand q^{ar} (t - z + q)^{a(1-rho)}
    x, w = np.polynomial.legendre.leggauss(n_inner)
    mid = 0.5 * (q_hi + q_lo)
    half = 0.5 * (q_hi - q_lo)
    qs = mid[:, None] + half[:, None] * x[None, :]
    base = np.maximum(t - z[:, None] + qs, 0.0)
    inner1 = half * np.sum(w[None, :] * qs ** ar * base ** a1r, axis=1)

    # second summand after u = q^{a(1-rho)}: (t - z + u^{1/a(1-rho)})^{ar+1} du / a(1-rho)
    u_lo = q_lo ** a1r
    u_hi = q_hi ** a1r
    midu = 0.5 * (u_hi + u_lo)
    halfu = 0.5 * (u_hi - u_lo)
    us = midu[:, None] + halfu[:, None] * x[None, :]
    qs2 = np.maximum(us, 0.0) ** (1.0 / a1r)
    base2 = np.maximum(t - z[:, None] + qs2, 0.0)
    inner2 = halfu * np.sum(w[None, :] * base2 ** (ar + 1.0), axis=1) / a1r

    cstar, _ = cstar_and_h(table, 0.0)
    pref = cstar / t ** (ar + 1.0)
    total = pref * ((ar + 1.0) * float(np.trapezoid(g * inner1, z))
                    + a1r * float(np.trapezoid(g * inner2, z)))
    return min(max(total, 0.0), 1.0)


def tail_closed_form(t: float, y: float, alpha_rho: float) -> float:
    """1 - (1 - (t and y)/t)^{alpha rho + 1}, evaluated exactly."""
    if t <= 0:
        raise ValueError("t must be positive")
    if alpha_rho <= 0:
        raise ValueError("alpha_rho must be positive")
    if y < 0:
        raise ValueError("y must be >= 0")
    frac = min(t, y) / t
    return 1.0 - (1.0 - frac) ** (alpha_rho + 1.0)


def a2_limit(spec: StableSpec, t: float, theta: float, z: float,
             ensemble: PathEnsemble, n_nodes: int = 256) -> tuple[float, float]:
    """A2(t, theta, z): window law for the shifted difference S_r - S_n.

    Quadrature over v in [0, t + z] of v^{ar} times
    P(-v theta^{1/a} <= min, -z theta^{1/a} <= Y1 <= (t - v) theta^{1/a}).
    A2(t, theta, inf) collapses to A(t theta^{1/a}, t theta^{1/a}) = 1.
    """
    if t <= 0 or theta <= 0:
        raise ValueError("t and theta must be positive")
    if z <= -t:
        raise ValueError("need z > -t")
    ar = spec.alpha_rho
    th = theta ** (1.0 / spec.alpha)
    hi = t + min(z, _w_cut(ensemble) / th)
    nodes, weights = _gauss_legendre(0.0, hi, n_nodes)
    mins, ends = ensemble.mins, ensemble.ends
    vals = np.empty(n_nodes)
    zlow = -z * th
    for i, v in enumerate(nodes):
        vals[i] = np.mean((mins >= -v * th) & (ends >= zlow) & (ends <= (t - v) * th))
    pref = (ar + 1.0) / t ** (ar + 1.0)
    value = pref * float(np.sum(weights * nodes ** ar * vals))
    err = pref * (hi ** (ar + 1.0) / (ar + 1.0)) * ensemble.error_halfwidth
    return min(max(value, 0.0), 1.0 + err), err


def meander_min_after(s: float, x: float, n_paths: int, rng: np.random.Generator,
                      spec: StableSpec | None = None, walk_length: int = 1000,
                      stage: int = 50) -> tuple[float, float]:
    """P(inf over [s,1] of the meander <= x) by conditioned-walk particles.

    Gaussian-increment check of the classical reduced-process limit; the
    particle population carries the post-s running minimum through the
    resampling steps.  Returns (estimate, rough half-width); the half-width
    treats particles as independent, which understates correlation
    introduced by resampling.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError("s must lie in [0, 1]")
    if x < 0:
        raise ValueError("x must be >= 0")
    spec = spec or StableSpec(2.0, 0.0)
    if s == 0.0:
        return 1.0, 0.0  # the infimum includes the start at 0
    cut = int(math.ceil(s * walk_length))
    S = np.zeros(n_paths)
    min_after = np.full(n_paths, np.inf)
    for j0 in range(0, walk_length, stage):
        b = min(stage, walk_length - j0)
        X = sample_increment(spec, rng, size=(b, n_paths))
        cs = np.cumsum(X, axis=0) + S
        ok = cs.min(axis=0) >= 0.0
        if not ok.any():
            raise InsufficientAcceptance("meander particle population died out")
        if j0 + b > cut:
            lo = max(cut - j0, 0)
            min_after = np.minimum(min_after, cs[lo:].min(axis=0))
        S = cs[-1]
        dead = ~ok
        if dead.any():
            src = rng.integers(0, int(ok.sum()), size=int(dead.sum()))
            S[dead] = S[ok][src]
            min_after[dead] = min_after[ok][src]
    a_l = norming(spec, walk_length)
    p = float(np.mean(min_after / a_l <= x))
    half = 2.5758 * math.sqrt(max(p * (1 - p), 1.0 / n_paths) / n_paths)
    return p, half


# ---------------------------------------------------------------------------
# regime reference CDFs used by the report layer
# ---------------------------------------------------------------------------

def reference_cdf(regime: str, spec: StableSpec, t: float, theta: float,
                  grid, ensemble: PathEnsemble | None = None,
                  meander: MeanderTable | None = None) -> np.ndarray:
    """Reference limit CDF on ``grid`` for a theorem regime's scaled statistic."""
    grid = np.asarray(grid, dtype=float)
    th = theta ** (1.0 / spec.alpha)
    if regime == "thm1_small_tail":
        return q_min_cdf(spec, grid, ensemble)
    if regime == "thm2_theta_m":
        return np.asarray([a_limit(spec, th * t, th * min(t, max(y, 0.0)), ensemble)[0]
                           for y in grid])
    if regime == "thm3_k_gg_r":
        return np.asarray([cstar_and_h(meander, max(y, 0.0))[1] for y in grid])
    if regime == "thm3_theta_r":
        return np.asarray([w_limit(spec, th * t, min(th * t, max(y, 0.0)), meander)
                           for y in grid])
    if regime == "thm3_min_gg_k":
        return np.asarray([tail_closed_form(t, max(y, 0.0), spec.alpha_rho)
                           for y in grid])
    raise ValueError(f"no reference law for regime {regime!r}")
