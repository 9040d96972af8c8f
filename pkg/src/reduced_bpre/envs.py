"""Random offspring-law environments and extinction-probability recursions.

An environment is an i.i.d. sequence of offspring laws whose log-mean
increments X_i follow a prescribed (typically stable) law; the conditional
mean of generation i is exactly e^{X_i}.  Two families are supported:

- linear_fractional: geometric pgf q/(1 - p s), p + q = 1, mean p/q; the
  second-factorial-moment ratio F''(1)/F'(1)^2 is the constant 2.
- poisson: pgf e^{lambda (s - 1)}; the same ratio is the constant 1.

Backward extinction compositions F_{r,n}(0) are evaluated in survival
log-space to survive the deep-subcritical stretches where 1 - F is of
order e^{min S}; the linear-fractional family also admits the exact
resolvent form  1 - F_{r,n}(0) = (sum_{j=r}^{n} e^{S_r - S_j})^{-1}
used as a cross-check and as the engine's closed form.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.special import logsumexp

from .stable import StableSpec

FAMILIES = ("linear_fractional", "poisson")

# F''(1)/F'(1)^2 is constant within each family
ETA_BY_FAMILY = {"linear_fractional": 2.0, "poisson": 1.0}

# |X| beyond which e^{X} is unusable in double precision
LOG_OVERFLOW_LIMIT = 700.0


class EnvOverflowError(RuntimeError):
    """An increment exceeded the representable log-mean range."""


@dataclass(frozen=True)
class EnvironmentModel:
    """Offspring family plus the law of the log-mean increments."""

    family: str
    increment_spec: StableSpec
    b2_exponent_margin: float = 1.0  # recorded moment margin, not used numerically

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.b2_exponent_margin <= 0:
            raise ValueError("b2_exponent_margin must be positive")

    @property
    def eta(self) -> float:
        return ETA_BY_FAMILY[self.family]


@dataclass(frozen=True)
class EnvRealization:
    """A drawn increment sequence with per-generation offspring parameters."""

    family: str
    increments: np.ndarray
    prefix: np.ndarray

    @property
    def n(self) -> int:
        return len(self.increments)

    @property
    def mean_offspring(self) -> np.ndarray:
        """F_i'(1) = e^{X_i}, exact for both families."""
        return np.exp(self.increments)

    @property
    def offspring_parameters(self) -> np.ndarray:
        """lambda_i for poisson; the geometric p_i = m_i/(1+m_i) otherwise."""
        m = self.mean_offspring
        if self.family == "poisson":
            return m
        return m / (1.0 + m)


def draw_environment(model: EnvironmentModel, n: int,
                     rng: np.random.Generator) -> EnvRealization:
    if n < 1:
        raise ValueError("n must be >= 1")
    inc = np.asarray(model.increment_spec.sample(rng, size=n), dtype=float)
    bad = np.abs(inc) > LOG_OVERFLOW_LIMIT
    if bad.any():
        raise EnvOverflowError(
            f"{int(bad.sum())} increment(s) beyond +-{LOG_OVERFLOW_LIMIT} in log scale")
    prefix = np.empty(n + 1)
    prefix[0] = 0.0
    np.cumsum(inc, out=prefix[1:])
    return EnvRealization(family=model.family, increments=inc, prefix=prefix)


def environment_from_increments(family: str, increments) -> EnvRealization:
    inc = np.asarray(increments, dtype=float)
    prefix = np.empty(len(inc) + 1)
    prefix[0] = 0.0
    np.cumsum(inc, out=prefix[1:])
    return EnvRealization(family=family, increments=inc, prefix=prefix)


def gf_eval(family: str, parameter: float, s) -> float | np.ndarray:
    """Probability generating function of one offspring law at s in [0, 1]."""
    s = np.asarray(s, dtype=float)
    if np.any((s < 0.0) | (s > 1.0)):
        raise ValueError("s must lie in [0, 1]")
    if family == "poisson":
        out = np.exp(parameter * (s - 1.0))
    elif family == "linear_fractional":
        p = parameter
        if not 0.0 < p < 1.0:
            raise ValueError(f"geometric parameter must be in (0,1), got {p}")
        out = (1.0 - p) / (1.0 - p * s)
    else:
        raise ValueError(f"unknown family {family!r}")
    return out if out.ndim else float(out)


class ExtinctionResult(NamedTuple):
    q: float              # F_{r,n}(0), the extinction probability by time n
    log_survival: float   # log(1 - q), exact in log space


def extinction_backward(env: EnvRealization, r: int, n: int) -> ExtinctionResult:
    """Backward composition F_{r,n}(0) with survival tracked in log space.

    The recursion runs j = n-1, ..., r with ls_j = log(1 - F_{j,n}(0)) and
    ls_n = 0.  Linear-fractional steps use the affine recursion of the
    reciprocal survival; poisson steps use log(-expm1(-w)) with
    w = e^{X_{j+1} + ls_{j+1}} guarded against underflow.
    """
    if not 0 <= r <= n <= env.n:
        raise ValueError(f"need 0 <= r <= n <= {env.n}, got r={r}, n={n}")
    X = env.increments
    if env.family == "linear_fractional":
        log_r = 0.0  # log R_n, R_j = 1 / (1 - F_{j,n}(0))
        for j in range(n - 1, r - 1, -1):
            log_r = np.logaddexp(0.0, log_r - X[j])
        ls = -log_r
    elif env.family == "poisson":
        ls = 0.0
        for j in range(n - 1, r - 1, -1):
            logw = X[j] + ls
            if logw < -700.0:
                ls = logw
            else:
                ls = math.log(-math.expm1(-math.exp(logw)))
    else:
        raise ValueError(f"unknown family {env.family!r}")
    q = -math.expm1(ls)
    return ExtinctionResult(q=min(max(q, 0.0), 1.0), log_survival=ls)


def survival_closed_form_lf(env: EnvRealization, r: int, n: int) -> float:
    """1 - F_{r,n}(0) for the linear-fractional family, by log-sum-exp."""
    if env.family != "linear_fractional":
        raise ValueError("closed form only applies to the linear_fractional family")
    if not 0 <= r <= n <= env.n:
        raise ValueError(f"need 0 <= r <= n <= {env.n}, got r={r}, n={n}")
    s = env.prefix
    return float(np.exp(-logsumexp(s[r] - s[r:n + 1])))


def survival_lower_bound(env: EnvRealization, r: int, n: int) -> float:
    """Lower bound (e^{-(S_n - S_r)} + sum_q eta e^{-(S_q - S_r)})^{-1}.

    The sum runs over q = r, ..., n-1 with the family's constant eta; the
    bound never exceeds the exact survival probability.
    """
    if not 0 <= r <= n <= env.n:
        raise ValueError(f"need 0 <= r <= n <= {env.n}, got r={r}, n={n}")
    eta = ETA_BY_FAMILY[env.family]
    s = env.prefix
    terms = np.concatenate([[s[r] - s[n]],
                            math.log(eta) + (s[r] - s[r:n])])
    return float(np.exp(-logsumexp(terms)))


def pgf_derivatives_at_one(family: str, parameter: float) -> tuple[float, float]:
    """(F'(1), F''(1)) evaluated from the family's closed derivative forms."""
    if family == "poisson":
        lam = parameter
        return lam, lam * lam
    if family == "linear_fractional":
        p = parameter
        q = 1.0 - p
        return p / q, 2.0 * p * p / (q * q)
    raise ValueError(f"unknown family {family!r}")


def eta_from_pgf(family: str, parameter: float) -> float:
    """F''(1)/F'(1)^2; equals the family constant for every parameter."""
    d1, d2 = pgf_derivatives_at_one(family, parameter)
    return d2 / (d1 * d1)


def numeric_mean_from_pgf(family: str, parameter: float, h: float = 1e-4) -> float:
    """F'(1) by a one-sided second-order difference of gf_eval."""
    f0 = gf_eval(family, parameter, 1.0)
    f1 = gf_eval(family, parameter, 1.0 - h)
    f2 = gf_eval(family, parameter, 1.0 - 2.0 * h)
    return float((3.0 * f0 - 4.0 * f1 + f2) / (2.0 * h))
