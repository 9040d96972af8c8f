"""Strictly stable laws and their path functionals.

Everything downstream is keyed off a :class:`StableSpec`, the law with
characteristic function

    G(w) = exp{-c |w|^alpha (1 - i beta sign(w) tan(pi alpha / 2))}.

Admissible parameters: alpha in (0,2) excluding 1 with |beta| < 1, or
alpha = 1 with beta = 0 (Cauchy), or alpha = 2 with beta = 0 (Gaussian,
variance 2c).  The module provides exact samplers (trigonometric
transform of a uniform/exponential pair), density evaluation by Fourier
inversion, the positivity parameter rho = P(Y_1 > 0), the norming
sequence a_n = n^{1/alpha}, discretized process paths, joint
(running minimum, endpoint) ensembles, and a particle estimator for the
time-1 density of the associated meander.

Conventions: the slowly varying factor in a_n is fixed to 1, and the
scale is c = 1/2 for alpha = 2 (so Y(1) is standard normal) and c = 1
otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import integrate


class QuadratureError(RuntimeError):
    """Numerical inversion/integration failed to reach tolerance."""


class InsufficientAcceptance(RuntimeError):
    """A conditioned simulation retained too few paths to be usable."""


def _validate_pair(alpha: float, beta: float) -> None:
    if not (0.0 < alpha <= 2.0):
        raise ValueError(f"alpha must lie in (0, 2], got {alpha}")
    if alpha == 2.0:
        if beta != 0.0:
            raise ValueError("alpha = 2 requires beta = 0")
    elif alpha == 1.0:
        if beta != 0.0:
            raise ValueError("alpha = 1 requires beta = 0")
    elif not (-1.0 < beta < 1.0):
        raise ValueError(f"|beta| < 1 required for alpha = {alpha}, got {beta}")


def default_scale(alpha: float) -> float:
    """Scale convention: 1/2 at alpha = 2 (standard normal), 1 otherwise."""
    return 0.5 if alpha == 2.0 else 1.0


@dataclass(frozen=True)
class StableSpec:
    """A strictly stable law (alpha, beta, c) with cached derived constants."""

    alpha: float
    beta: float = 0.0
    c: float = None  # type: ignore[assignment]

    def __post_init__(self):
        _validate_pair(self.alpha, self.beta)
        if self.c is None:
            object.__setattr__(self, "c", default_scale(self.alpha))
        if self.c <= 0:
            raise ValueError(f"scale c must be positive, got {self.c}")

    # skew factor b = c * beta * tan(pi alpha / 2) appearing in the CF phase
    @property
    def skew_term(self) -> float:
        if self.alpha == 2.0 or self.beta == 0.0:
            return 0.0
        return self.c * self.beta * math.tan(math.pi * self.alpha / 2.0)

    @property
    def rho(self) -> float:
        """Positivity parameter P(Y_1 > 0), cached after first evaluation."""
        return positivity_rho(self)

    @property
    def alpha_rho(self) -> float:
        return self.alpha * self.rho

    def cf(self, w):
        """Characteristic function G(w), vectorized."""
        w = np.asarray(w, dtype=float)
        mag = self.c * np.abs(w) ** self.alpha
        phase = self.skew_term * np.sign(w) * np.abs(w) ** self.alpha
        return np.exp(-mag + 1j * phase)

    def sample(self, rng: np.random.Generator, size=None):
        return sample_increment(self, rng, size=size)


def sample_increment(spec: StableSpec, rng: np.random.Generator, size=None):
    """Draw from the stable law by the trigonometric transform.

    Uses a uniform angle V on (-pi/2, pi/2) and a unit exponential W; the
    output has characteristic function exp{-c|w|^a (1 - i b sgn(w) tan(pi a/2))}.
    """
    a, b, c = spec.alpha, spec.beta, spec.c
    V = rng.uniform(-math.pi / 2.0, math.pi / 2.0, size=size)
    if a == 1.0:  # Cauchy, beta = 0 enforced at construction
        return c * np.tan(V)
    W = rng.standard_exponential(size=size)
    scale = c ** (1.0 / a)
    if b == 0.0 or a == 2.0:
        x = (np.sin(a * V) / np.cos(V) ** (1.0 / a)
             * (np.cos((1.0 - a) * V) / W) ** ((1.0 - a) / a))
        return scale * x
    tanpa2 = math.tan(math.pi * a / 2.0)
    B = math.atan(b * tanpa2) / a
    S = (1.0 + (b * tanpa2) ** 2) ** (1.0 / (2.0 * a))
    x = (S * np.sin(a * (V + B)) / np.cos(V) ** (1.0 / a)
         * (np.cos(V - a * (V + B)) / W) ** ((1.0 - a) / a))
    return scale * x


def _inversion_cutoff(spec: StableSpec, tail: float = 1e-10) -> float:
    # e^{-c W^alpha} < tail  <=>  W > (ln(1/tail)/c)^{1/alpha}
    return (math.log(1.0 / tail) / spec.c) ** (1.0 / spec.alpha)


def stable_density(spec: StableSpec, x: float, tol: float = 1e-9) -> float:
    """Density g(x) by adaptive quadrature of the real inversion integrand.

    g(x) = (1/pi) int_0^Wmax exp(-c w^a) cos(b w^a - w x) dw with the tail
    beyond Wmax below 1e-10.  Raises QuadratureError if the reported
    absolute error exceeds ``tol``.
    """
    a, c, b = spec.alpha, spec.c, spec.skew_term
    wmax = _inversion_cutoff(spec)

    def integrand(w):
        return math.exp(-c * w ** a) * math.cos(b * w ** a - w * x)

    val, err = integrate.quad(integrand, 0.0, wmax, limit=400)
    if err > tol * max(1.0, abs(val)) + tol:
        raise QuadratureError(
            f"density inversion at x={x}: reported error {err:.2e} exceeds tolerance")
    return val / math.pi


@lru_cache(maxsize=256)
def _rho_cached(alpha: float, beta: float, c: float) -> float:
    spec = StableSpec(alpha, beta, c)
    a, b = spec.alpha, spec.skew_term
    if b == 0.0:
        # the odd part of the density vanishes identically
        return 0.5
    wmax = _inversion_cutoff(spec)

    # P(Y > 0) - 1/2 = int_0^inf (g(x) - g(-x))/2 dx reduces, after swapping
    # the integration order with the inversion integral, to a single
    # absolutely convergent frequency integral.
    def integrand(w):
        return math.exp(-c * w ** a) * math.sin(b * w ** a) / w

    v1, e1 = integrate.quad(integrand, 0.0, min(1.0, wmax), limit=400)
    v2, e2 = integrate.quad(integrand, min(1.0, wmax), wmax, limit=400)
    val, err = v1 + v2, e1 + e2
    if err > 1e-7:
        raise QuadratureError(f"rho integration error {err:.2e}")
    rho = 0.5 + val / math.pi
    if not (0.0 < rho < 1.0):
        raise QuadratureError(f"rho = {rho} escaped (0, 1)")
    return rho


def positivity_rho(spec: StableSpec) -> float:
    """P(Y_1 > 0), from integrating the density's odd part over (0, inf)."""
    return _rho_cached(spec.alpha, spec.beta, spec.c)


def norming(spec: StableSpec, n: int) -> float:
    """Norming sequence a_n = n^{1/alpha} (unit slowly varying factor)."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return float(n) ** (1.0 / spec.alpha)


def b_norming(spec: StableSpec, n: int) -> float:
    """b_n = 1 / (n a_n)."""
    return 1.0 / (n * norming(spec, n))


@dataclass(frozen=True)
class StablePath:
    """Scaled partial-sum path Y(j/grid_size), j = 0..grid_size, Y(0) = 0."""

    grid_size: int
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.grid_size + 1:
            raise ValueError("values must have length grid_size + 1")
        if self.values[0] != 0.0:
            raise ValueError("path must start at 0")

    @property
    def minimum(self) -> float:
        return float(self.values.min())

    @property
    def endpoint(self) -> float:
        return float(self.values[-1])


def sample_path(spec: StableSpec, grid_size: int, rng: np.random.Generator) -> StablePath:
    """One path of grid_size scaled increments; Y(1) is distributed per spec."""
    if grid_size < 1:
        raise ValueError("grid_size must be >= 1")
    inc = sample_increment(spec, rng, size=grid_size) * grid_size ** (-1.0 / spec.alpha)
    vals = np.empty(grid_size + 1)
    vals[0] = 0.0
    np.cumsum(inc, out=vals[1:])
    return StablePath(grid_size, vals)


@dataclass
class PathEnsemble:
    """Empirical joint law of (min over [0,1], endpoint) for one spec.

    One shared ensemble per spec serves every joint-probability query so
    that monotonicity checks across arguments use common random numbers.
    DKW-style half-widths at confidence 1 - delta accompany each query.
    """

    spec: StableSpec
    mins: np.ndarray
    ends: np.ndarray
    grid_size: int
    delta: float = 0.01

    @property
    def n_paths(self) -> int:
        return len(self.mins)

    @property
    def error_halfwidth(self) -> float:
        return math.sqrt(math.log(2.0 / self.delta) / (2.0 * self.n_paths))

    def joint_prob(self, min_lo=-np.inf, min_hi=np.inf, end_lo=-np.inf, end_hi=np.inf):
        """P(min_lo <= min <= min_hi, end_lo <= Y1 <= end_hi) with error bound."""
        ok = ((self.mins >= min_lo) & (self.mins <= min_hi)
              & (self.ends >= end_lo) & (self.ends <= end_hi))
        return float(np.mean(ok)), self.error_halfwidth

    def prob_min_le(self, z: float) -> float:
        return float(np.mean(self.mins <= z))


def min_and_endpoint_sampler(spec: StableSpec, grid_size: int, n_paths: int,
                             rng: np.random.Generator,
                             batch: int = 4096) -> PathEnsemble:
    """Simulate n_paths scaled paths, retaining (running min, endpoint) only."""
    if n_paths < 1:
        raise ValueError("n_paths must be >= 1")
    scale = grid_size ** (-1.0 / spec.alpha)
    mins = np.empty(n_paths)
    ends = np.empty(n_paths)
    done = 0
    while done < n_paths:
        m = min(batch, n_paths - done)
        inc = sample_increment(spec, rng, size=(m, grid_size)) * scale
        cs = np.cumsum(inc, axis=1)
        mins[done:done + m] = np.minimum(cs.min(axis=1), 0.0)  # Y(0) = 0
        ends[done:done + m] = cs[:, -1]
        done += m
    return PathEnsemble(spec=spec, mins=mins, ends=ends, grid_size=grid_size)


@dataclass
class MeanderTable:
    """Estimated time-1 density of the meander on a positive grid."""

    spec: StableSpec
    z_grid: np.ndarray
    density: np.ndarray
    n_paths: int
    walk_length: int
    raw_integral: float  # trapezoid mass before renormalization
    method: str = "particles"

    def __call__(self, z):
        return np.interp(z, self.z_grid, self.density, left=0.0, right=0.0)


def _meander_endpoints_particles(spec, walk_length, n_particles, rng, stage=250):
    """Endpoints S_L / a_L of walks conditioned to stay >= 0, by staged resampling.

    Particles advance in blocks; paths that dip below zero are replaced by
    uniform draws from the stage's survivors.  The surviving population at
    the final time targets the law of S_L given min_{j<=L} S_j >= 0.
    """
    S = np.zeros(n_particles)
    for j0 in range(0, walk_length, stage):
        b = min(stage, walk_length - j0)
        X = sample_increment(spec, rng, size=(b, n_particles))
        cs = np.cumsum(X, axis=0) + S
        ok = cs.min(axis=0) >= 0.0
        n_ok = int(np.count_nonzero(ok))
        if n_ok == 0:
            raise InsufficientAcceptance(
                f"all {n_particles} particles died in steps [{j0}, {j0 + b})")
        S = cs[-1]
        dead = ~ok
        n_dead = n_particles - n_ok
        if n_dead:
            S[dead] = S[ok][rng.integers(0, n_ok, size=n_dead)]
    return S / norming(spec, walk_length)


def _meander_endpoints_rejection(spec, walk_length, n_target, rng,
                                 max_batches=4000, batch=20000):
    """Plain rejection on {min >= 0}; reference oracle for short walks."""
    out = []
    got = 0
    for _ in range(max_batches):
        S = np.zeros(batch)
        alive = np.arange(batch)
        j = 0
        while j < walk_length and alive.size:
            b = min(64, walk_length - j)
            X = sample_increment(spec, rng, size=(b, alive.size))
            cs = np.cumsum(X, axis=0) + S[alive]
            keep = cs.min(axis=0) >= 0.0
            S[alive] = cs[-1]
            alive = alive[keep]
            j += b
        out.append(S[alive].copy())
        got += alive.size
        if got >= n_target:
            break
    if got < max(n_target // 10, 100):
        raise InsufficientAcceptance(
            f"rejection kept {got} of >= {n_target} requested meander paths")
    return np.concatenate(out) / norming(spec, walk_length)


def meander_density(spec: StableSpec, z_grid, n_paths: int, rng: np.random.Generator,
                    walk_length: int = 10_000, method: str = "particles",
                    normalize_tol: float = 0.05) -> MeanderTable:
    """Estimate the meander's time-1 density on ``z_grid`` by conditioned walks.

    The histogram of conditioned-walk endpoints S_L / a_L is interpolated to
    the grid and renormalized to unit trapezoid mass; the pre-normalization
    mass is kept in ``raw_integral`` as a diagnostic (it should be close to
    the probability mass inside the grid span).
    """
    z_grid = np.asarray(z_grid, dtype=float)
    if z_grid.ndim != 1 or len(z_grid) < 8 or np.any(np.diff(z_grid) <= 0) or z_grid[0] < 0:
        raise ValueError("z_grid must be increasing, nonnegative, with >= 8 points")
    if method == "particles":
        ends = _meander_endpoints_particles(spec, walk_length, n_paths, rng)
    elif method == "rejection":
        ends = _meander_endpoints_rejection(spec, walk_length, n_paths, rng)
    else:
        raise ValueError(f"unknown method {method!r}")

    lo, hi = z_grid[0], z_grid[-1]
    nbins = max(40, len(z_grid) // 2)
    counts, edges = np.histogram(ends, bins=nbins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    dens = counts / (len(ends) * (edges[1] - edges[0]))
    on_grid = np.interp(z_grid, centers, dens, left=dens[0], right=0.0)
    raw = float(np.trapezoid(on_grid, z_grid))
    if raw <= 0:
        raise InsufficientAcceptance("meander histogram carries no mass on the grid")
    if abs(raw - 1.0) > max(normalize_tol, 0.5):
        raise QuadratureError(
            f"meander mass on grid is {raw:.3f}; widen the grid before normalizing")
    return MeanderTable(spec=spec, z_grid=z_grid, density=on_grid / raw,
                        n_paths=len(ends), walk_length=walk_length,
                        raw_integral=raw, method=method)
