"""Conditioned branching-process trials and the reduced-process sampler.

A trial draws an environment and its walk, simulates the population, and
accepts when the non-favorable event {S_n <= t a_k, Z_n > 0} occurs.  For
accepted trials the sample records the reduced count Z_{r,n} (ancestors at
generation r with surviving descendants at n) together with the walk
functionals entering the limit theorems.

Two execution paths produce identically distributed samples:

- :func:`run_conditioned_trial` follows the staged pipeline literally
  (walk predicate, generation chain, backward extinction, binomial
  reduction) and works for any family.
- the linear-fractional engine exploits the family's exact resolvent
  R_{r,n} = sum_{j=r}^{n} e^{S_r - S_j}: survival is decided by a single
  uniform against 1/R_{0,n} (with an exact early-kill as the partial sums
  grow), and (Z_{r,n}, Z_r) given acceptance are drawn from their exact
  conditional laws (shifted geometric, then negative binomial).  This
  removes the per-generation population simulation from the hot loop.

The engine processes trials in fixed-size chunks with per-chunk
counter-derived random streams, so results are reproducible and
independent of how chunks are distributed over workers.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .envs import (ETA_BY_FAMILY, EnvironmentModel, EnvOverflowError,
                   EnvRealization, draw_environment, extinction_backward)
from .stable import InsufficientAcceptance, StableSpec, norming
from .walk import RenewalTable, WalkPath, event_b_probability, min_stats

REGIMES = ("thm1_small_tail", "thm2_theta_m", "thm3_k_gg_r", "thm3_theta_r",
           "thm3_min_gg_k", "walk_only")

EXACT_CHAIN_CAP = 1_000_000_000   # exact integer sampling below, CLT update above
POISSON_SAFE_MAX = 1e15           # numpy poisson/binomial stay exact-ish below


@dataclass(frozen=True)
class ScenarioSpec:
    """A theorem regime instantiated at horizon n.

    The growth schedules quantify the asymptotic orderings: thm1 uses
    m = ceil(n^0.35), k = ceil(n^0.65); thm2 uses m = ceil(sqrt(n)),
    k = ceil(theta m); thm3 variants use r = ceil(n^0.3), k = ceil(n^0.6) /
    r = ceil(sqrt(n)), k = ceil(theta r) / r = floor(n/2), k = ceil(n^0.4).
    Explicit k/r override the schedule but still face the ordering checks.
    """

    model: EnvironmentModel
    n: int
    regime: str
    t: float = 1.0
    theta: float = 1.0
    k: int = None           # type: ignore[assignment]
    r: int = None           # type: ignore[assignment]
    target_accepted: int = 5000
    max_trials: int = 2_000_000_000
    seed: int = 0
    x_override: float = None  # type: ignore[assignment]  # explicit threshold

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"regime must be one of {REGIMES}, got {self.regime!r}")
        if self.n < 4:
            raise ValueError("n must be >= 4")
        if self.t <= 0:
            raise ValueError("t must be positive")
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        n = self.n
        k, r = self.k, self.r
        if self.regime == "thm1_small_tail":
            m = int(math.ceil(n ** 0.35))
            if r is None:
                r = n - m
            if k is None:
                k = int(math.ceil(n ** 0.65))
        elif self.regime == "thm2_theta_m":
            m = int(math.ceil(n ** 0.5))
            if r is None:
                r = n - m
            if k is None:
                k = int(math.ceil(self.theta * m))
        elif self.regime == "thm3_k_gg_r":
            if r is None:
                r = int(math.ceil(n ** 0.3))
            if k is None:
                k = int(math.ceil(n ** 0.6))
        elif self.regime == "thm3_theta_r":
            if r is None:
                r = int(math.ceil(n ** 0.5))
            if k is None:
                k = int(math.ceil(self.theta * r))
        elif self.regime == "thm3_min_gg_k":
            if r is None:
                r = n // 2
            if k is None:
                k = int(math.ceil(n ** 0.4))
        else:  # walk_only
            if r is None:
                r = n // 2
            if k is None:
                k = int(math.ceil(n ** 0.65))
        object.__setattr__(self, "k", int(k))
        object.__setattr__(self, "r", int(r))
        self._check_ordering()

    def _check_ordering(self):
        n, k, r, m = self.n, self.k, self.r, self.m
        if not (1 <= r <= n and 1 <= k < n):
            raise ValueError(f"need 1 <= r <= n and 1 <= k < n (r={r}, k={k}, n={n})")
        if self.regime == "thm1_small_tail" and not (k > m):
            raise ValueError(f"thm1 ordering violated: k={k} must exceed m={m}")
        if self.regime == "thm3_k_gg_r" and not (k > r):
            raise ValueError(f"thm3_k_gg_r ordering violated: k={k} must exceed r={r}")
        if self.regime == "thm3_min_gg_k" and not (min(r, n - r) > k):
            raise ValueError(
                f"thm3_min_gg_k ordering violated: min(r, n-r)={min(r, n - r)} "
                f"must exceed k={k}")

    @property
    def m(self) -> int:
        return self.n - self.r

    @property
    def spec(self) -> StableSpec:
        return self.model.increment_spec

    @property
    def x_threshold(self) -> float:
        """The conditioning level t a_k (or the explicit override)."""
        if self.x_override is not None:
            return self.x_override
        return self.t * norming(self.spec, self.k)

    @property
    def cond_log_ok(self) -> bool:
        """Recorded check log(n - r) <= a_{k and r}/10 for the thm3 regimes."""
        if not self.regime.startswith("thm3"):
            return True
        if self.m < 1:
            return True
        return math.log(self.m) <= norming(self.spec, min(self.k, self.r)) / 10.0

    @property
    def scale_length(self) -> int:
        """Index whose norming scales log Z_{r,n} in this regime's limit law."""
        if self.regime in ("thm1_small_tail", "thm2_theta_m"):
            return self.m
        if self.regime in ("thm3_k_gg_r", "thm3_theta_r"):
            return self.r
        return self.k

    @property
    def scale_norming(self) -> float:
        return norming(self.spec, self.scale_length)


@dataclass
class ReducedSample:
    """One accepted conditioned trial."""

    trial_index: int
    S_r: float
    S_n: float
    S_tau: float
    tau_rn: int
    Z_r: float        # float to allow populations beyond 2^53
    q_rn: float
    Z_rn: float
    O_rn: float
    Delta_rn: float


@dataclass
class SampleBatch:
    """Accepted samples plus trial accounting from a run."""

    scenario: ScenarioSpec
    samples: list[ReducedSample]
    n_trials: int
    n_survived: int      # Z_n > 0 regardless of the walk predicate
    n_discarded: int     # overflow discards
    n_steps: int = 0

    @property
    def n_accepted(self) -> int:
        return len(self.samples)

    @property
    def acceptance_rate(self) -> float:
        return self.n_accepted / self.n_trials if self.n_trials else math.nan

    def field_array(self, name: str) -> np.ndarray:
        return np.asarray([getattr(s, name) for s in self.samples], dtype=float)

    def log_reduced_scaled(self) -> np.ndarray:
        """(log Z_{r,n}) / a_scale for this scenario's regime."""
        return np.log(self.field_array("Z_rn")) / self.scenario.scale_norming

    def log_reduced_minus_sr_scaled(self) -> np.ndarray:
        """(log Z_{r,n} - S_r) / a_m, the centered statistic."""
        a_m = norming(self.scenario.spec, max(self.scenario.m, 1))
        return ((np.log(self.field_array("Z_rn")) - self.field_array("S_r")) / a_m)


# ---------------------------------------------------------------------------
# generation-chain simulation and binomial reduction (exact building blocks)
# ---------------------------------------------------------------------------

def simulate_generation_chain(env: EnvRealization, r: int, rng: np.random.Generator,
                              z0: int = 1, exact_cap: float = EXACT_CHAIN_CAP) -> np.ndarray:
    """Population sizes Z_0..Z_r given the environment, state 0 absorbing.

    Exact transition draws (negative binomial for the linear-fractional
    family, poisson otherwise) are used while Z <= exact_cap; beyond the
    cap the one-step conditional law is replaced by its CLT surrogate
    (relative error O(cap^{-1/2}) per step), which keeps huge supercritical
    stretches representable without integer overflow.
    """
    if not 0 <= r <= env.n:
        raise ValueError(f"need 0 <= r <= {env.n}")
    out = np.empty(r + 1)
    out[0] = z = float(z0)
    means = env.mean_offspring
    for j in range(1, r + 1):
        if z == 0.0:
            out[j:] = 0.0
            return out
        m = means[j - 1]
        if z <= exact_cap:
            zi = int(z)
            if env.family == "linear_fractional":
                p = m / (1.0 + m)
                z = float(rng.negative_binomial(zi, 1.0 - p))
            else:
                lam = zi * m
                if lam <= POISSON_SAFE_MAX:
                    z = float(rng.poisson(lam))
                else:
                    z = max(0.0, math.floor(lam + math.sqrt(lam) * rng.standard_normal()))
        else:
            var = z * (m * (1.0 + m) if env.family == "linear_fractional" else m)
            z = max(0.0, math.floor(z * m + math.sqrt(var) * rng.standard_normal()))
        out[j] = z
    return out


def reduced_count(z_r: float, q_rn: float, rng: np.random.Generator) -> float:
    """Binomial(Z_r, 1 - q_rn) draw, exact while numpy's samplers allow."""
    if z_r < 0:
        raise ValueError("Z_r must be >= 0")
    if not 0.0 <= q_rn <= 1.0:
        raise ValueError("q_rn must lie in [0, 1]")
    if z_r == 0 or q_rn == 1.0:
        return 0.0
    p = 1.0 - q_rn
    if z_r <= 9e15:
        return float(rng.binomial(int(z_r), p))
    mean = z_r * p
    sd = math.sqrt(z_r * p * q_rn)
    return max(0.0, math.floor(mean + sd * rng.standard_normal() + 0.5))


def _sample_fields(scenario, trial_index, env, z_chain, q_rn, log_survival, z_rn):
    path = WalkPath.from_increments(env.increments)
    r, n = scenario.r, scenario.n
    stats = min_stats(path, r)
    s = path.prefix
    eta = ETA_BY_FAMILY[env.family]
    o_rn = 1.0 + eta * float(np.exp(stats.l_rn - s[r:n]).sum())
    z_r = float(z_chain[r])
    delta = math.log(z_r) + log_survival - stats.l_rn
    return ReducedSample(trial_index=trial_index, S_r=float(s[r]), S_n=float(s[n]),
                         S_tau=stats.l_rn, tau_rn=stats.tau_rn, Z_r=z_r,
                         q_rn=q_rn, Z_rn=float(z_rn), O_rn=o_rn, Delta_rn=delta)


def run_conditioned_trial(scenario: ScenarioSpec, rng: np.random.Generator,
                          trial_index: int = 0) -> ReducedSample | None:
    """One staged trial: walk predicate, chain to r, extinction, reduction.

    Returns the accepted sample or None.  Raises EnvOverflowError when the
    environment draw is unrepresentable (callers discard and count).
    """
    env = draw_environment(scenario.model, scenario.n, rng)
    if env.prefix[-1] > scenario.x_threshold:
        return None
    z_chain = simulate_generation_chain(env, scenario.r, rng)
    if z_chain[scenario.r] == 0:
        return None
    q_rn, log_survival = extinction_backward(env, scenario.r, scenario.n)
    z_rn = reduced_count(z_chain[scenario.r], q_rn, rng)
    if z_rn < 1:
        return None
    return _sample_fields(scenario, trial_index, env, z_chain, q_rn,
                          log_survival, z_rn)


def run_trials_generic(scenario: ScenarioSpec, rng: np.random.Generator,
                       n_trials: int) -> SampleBatch:
    """Loop of staged trials; the reference path for any offspring family."""
    samples = []
    discarded = 0
    for i in range(n_trials):
        try:
            s = run_conditioned_trial(scenario, rng, trial_index=i)
        except EnvOverflowError:
            discarded += 1
            continue
        if s is not None:
            samples.append(s)
        if len(samples) >= scenario.target_accepted:
            return SampleBatch(scenario, samples, n_trials=i + 1,
                               n_survived=-1, n_discarded=discarded)
    return SampleBatch(scenario, samples, n_trials=n_trials,
                       n_survived=-1, n_discarded=discarded)


# ---------------------------------------------------------------------------
# linear-fractional chunk engine
# ---------------------------------------------------------------------------

CHUNK_SIZE = 1 << 15


def _chunk_rng(seed: int, chunk_index: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=(int(seed) & ((1 << 63) - 1), chunk_index))))


def _nb_failures(rng: np.random.Generator, counts: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Vectorized negative binomial tolerant of extreme means.

    numpy's sampler breaks once the implied poisson mean leaves the exact
    range, so the gamma-poisson construction switches to its CLT tail there.
    """
    counts = np.asarray(counts, dtype=np.int64)
    p = np.clip(np.asarray(p, dtype=float), 1e-300, 1.0)
    lam = rng.gamma(shape=counts.astype(float)) * (1.0 - p) / p
    out = np.empty(len(lam))
    small = lam <= POISSON_SAFE_MAX
    if small.any():
        out[small] = rng.poisson(lam[small])
    big = ~small
    if big.any():
        out[big] = np.floor(lam[big] + np.sqrt(lam[big]) * rng.standard_normal(int(big.sum())))
    return out


class _LfChunkState:
    """Compacted per-row walk state; rows are dropped as trials die."""

    __slots__ = ("rows", "S", "R", "inv_u", "R0rm1", "S_r", "Rtail",
                 "tail_min", "tau", "E_n")

    def __init__(self, m0, rng):
        u = rng.random(m0)
        inv_u = np.empty(m0)
        np.divide(1.0, u, out=inv_u, where=u > 0)
        inv_u[u == 0.0] = np.inf
        self.rows = np.arange(m0)
        self.S = np.zeros(m0)
        self.R = np.ones(m0)               # running sum of e^{-S_i}
        self.inv_u = inv_u
        self.R0rm1 = np.zeros(m0)          # sum_{i <= r-1} e^{-S_i}
        self.S_r = np.zeros(m0)
        self.Rtail = np.zeros(m0)          # sum_{j = r..cur} e^{-S_j}
        self.tail_min = np.full(m0, np.inf)
        self.tau = np.zeros(m0, dtype=np.int64)
        self.E_n = np.zeros(m0)            # e^{-S_n}

    def compress(self, keep):
        for name in self.__slots__:
            setattr(self, name, getattr(self, name)[keep])


def run_chunk_lf(scenario: ScenarioSpec, chunk_index: int,
                 chunk_size: int = CHUNK_SIZE) -> SampleBatch:
    """All trials of one chunk via the linear-fractional closed forms.

    Survival of the whole trial is coupled to one uniform U: the trial is
    dead as soon as the running resolvent sum exceeds 1/U, and trials alive
    at n with S_n within the threshold are exactly the accepted ones.
    """
    if scenario.model.family != "linear_fractional":
        raise ValueError("the chunk engine requires the linear_fractional family")
    rng = _chunk_rng(scenario.seed, chunk_index)
    sampler = scenario.spec
    n, r = scenario.n, scenario.r
    x_threshold = scenario.x_threshold
    m0 = chunk_size

    st = _LfChunkState(m0, rng)
    counters = {"discarded": 0, "steps": 0}

    def advance(lo, hi, tail):
        """Steps producing S_lo..S_hi for live rows, with early kill."""
        j = lo
        b = 1 if tail and lo == r else 8
        while j <= hi and st.rows.size:
            b = min(b, hi - j + 1)
            X = sampler.sample(rng, size=(b, st.rows.size))
            cs = np.cumsum(X, axis=0) + st.S
            with np.errstate(over="ignore"):
                E = np.exp(-cs)
            bad = ~np.isfinite(E).all(axis=0)
            if bad.any():
                counters["discarded"] += int(bad.sum())
                E[:, bad] = 0.0
            counters["steps"] += b * st.rows.size
            esum = E.sum(axis=0)
            st.S = cs[-1]
            st.R = st.R + esum
            if tail:
                st.Rtail = st.Rtail + esum
                bmin = cs.min(axis=0)
                better = bmin < st.tail_min
                if better.any():
                    barg = np.argmin(cs, axis=0)
                    st.tail_min = np.where(better, bmin, st.tail_min)
                    st.tau = np.where(better, j + barg, st.tau)
                if j <= n <= j + b - 1:
                    st.E_n = E[n - j]
                if j == r:
                    st.S_r = cs[0]
            keep = (st.R <= st.inv_u) & ~bad
            if not keep.all():
                st.compress(keep)
            j += b
            b = min(64, 2 * b)

    if r >= 1:
        if r >= 2:
            advance(1, r - 1, tail=False)
        st.R0rm1 = st.R.copy()
        st.tau[:] = r
        advance(r, n, tail=True)
    else:
        # r = 0: the tail window starts at S_0 = 0 before any step
        st.Rtail[:] = 1.0
        st.tail_min[:] = 0.0
        st.E_n[:] = 1.0
        advance(1, n, tail=True)

    n_survived = int(st.rows.size)
    accept = st.S <= x_threshold
    if not accept.all():
        st.compress(accept)
    acc = st.rows
    discarded = counters["discarded"]

    samples: list[ReducedSample] = []
    if acc.size:
        a = np.arange(acc.size)
        r0 = st.R0rm1
        rt = st.Rtail
        e_r = np.exp(-st.S_r)
        gamma = np.where(r0 > 0, r0 / (r0 + rt), 0.0)
        u2 = rng.random(acc.size)
        with np.errstate(divide="ignore", invalid="ignore"):
            g = np.where(gamma > 0, np.floor(np.log(u2) / np.log(gamma)), 0.0)
        z_rn = 1.0 + np.where(np.isfinite(g), g, 0.0)
        s_rn = np.minimum(e_r / rt, 1.0)
        r0r = r0 + e_r
        # success probability 1 - gamma0 (1 - s_rn) formed without cancellation:
        # p = e^{-S_r}/R_{0,r} + gamma0 s_rn, a sum of positives
        p_nb = np.maximum(e_r / r0r + (r0 / r0r) * s_rn, 1e-290)
        extra = np.zeros(acc.size)
        pos = p_nb < 1.0
        if pos.any():
            extra[pos] = _nb_failures(rng, (z_rn[pos] + 1).astype(np.int64), p_nb[pos])
        z_r = z_rn + extra
        eta = scenario.model.eta
        o_rn = 1.0 + eta * np.exp(st.tail_min) * np.maximum(rt - st.E_n, 0.0)
        q_rn = 1.0 - s_rn
        delta = np.log(z_r) + np.log(s_rn) - st.tail_min
        finite = np.isfinite(z_r) & np.isfinite(delta)
        if not finite.all():
            discarded += int((~finite).sum())
        base = chunk_index * chunk_size
        for i in np.flatnonzero(finite):
            samples.append(ReducedSample(
                trial_index=base + int(acc[i]), S_r=float(st.S_r[i]), S_n=float(st.S[i]),
                S_tau=float(st.tail_min[i]), tau_rn=int(st.tau[i]), Z_r=float(z_r[i]),
                q_rn=float(q_rn[i]), Z_rn=float(z_rn[i]), O_rn=float(o_rn[i]),
                Delta_rn=float(delta[i])))
    return SampleBatch(scenario=scenario, samples=samples, n_trials=m0,
                       n_survived=n_survived, n_discarded=discarded,
                       n_steps=counters["steps"])


def merge_batches(scenario: ScenarioSpec, batches: Iterable[SampleBatch]) -> SampleBatch:
    samples = []
    trials = survived = discarded = steps = 0
    for b in batches:
        samples.extend(b.samples)
        trials += b.n_trials
        survived += b.n_survived
        discarded += b.n_discarded
        steps += b.n_steps
    return SampleBatch(scenario=scenario, samples=samples, n_trials=trials,
                       n_survived=survived, n_discarded=discarded, n_steps=steps)


def run_scenario_samples(scenario: ScenarioSpec,
                         chunk_runner: Callable[[ScenarioSpec, int], SampleBatch] | None = None,
                         map_fn=map) -> SampleBatch:
    """Run chunks in index order until the accepted target (or trial cap).

    ``map_fn`` may be a pool's map; chunk results are consumed in index
    order so the set of contributing chunks, and hence the output, does not
    depend on the executor.
    """
    if chunk_runner is None:
        if scenario.model.family == "linear_fractional":
            chunk_runner = run_chunk_lf
        else:
            rng = _chunk_rng(scenario.seed, 0)
            return run_trials_generic(scenario, rng, scenario.max_trials)
    max_chunks = max(1, math.ceil(scenario.max_trials / CHUNK_SIZE))
    batches = []
    got = 0
    wave = 8
    next_chunk = 0
    while next_chunk < max_chunks and got < scenario.target_accepted:
        idxs = range(next_chunk, min(next_chunk + wave, max_chunks))
        for b in map_fn(_chunk_call, [(scenario, i) for i in idxs]):
            batches.append(b)
            got += b.n_accepted
        next_chunk = idxs.stop
        wave = min(4 * wave, 512)
    out = merge_batches(scenario, batches)
    if out.n_accepted < min(scenario.target_accepted, 1):
        raise InsufficientAcceptance(
            f"no acceptances in {out.n_trials} trials for {scenario.regime} at n={scenario.n}")
    return out


def _chunk_call(args):
    scenario, idx = args
    return run_chunk_lf(scenario, idx)


# ---------------------------------------------------------------------------
# exact tiny-instance oracle
# ---------------------------------------------------------------------------

@dataclass
class TinyLaw:
    """Exact joint law of (Z_r, Z_rn, accept) for a finite-atom environment."""

    p_accept: float
    p_survival: float                      # P(Z_n > 0)
    joint_given_accept: dict               # (z_r, z_rn) -> probability
    z_cap: int
    lost_mass: float                       # probability leaked past the cap
    total_mass: float                      # sanity: should be 1 within 1e-12

    def tv_against_counts(self, counts: dict, n_accepted: int) -> float:
        keys = set(self.joint_given_accept) | set(counts)
        return 0.5 * sum(abs(self.joint_given_accept.get(k, 0.0)
                             - counts.get(k, 0) / n_accepted) for k in keys)


def _offspring_pmf(family: str, mean: float, cap: int) -> np.ndarray:
    k = np.arange(cap + 1)
    if family == "linear_fractional":
        p = mean / (1.0 + mean)
        pmf = (1.0 - p) * p ** k
    elif family == "poisson":
        logpmf = k * math.log(mean) - mean - np.array([math.lgamma(i + 1) for i in k])
        pmf = np.exp(logpmf)
    else:
        raise ValueError(family)
    return pmf


def brute_force_tiny(family: str, atoms: Sequence[tuple[float, float]], n: int, r: int,
                     x_threshold: float, z_cap: int = 80, z0: int = 1) -> TinyLaw:
    """Exact enumeration over environment sequences and population DP.

    ``atoms`` lists (increment, probability) pairs of the discrete
    environment increment law.  Offspring supports are truncated at z_cap
    with the leaked mass tracked (never redistributed), so every reported
    probability is a true lower bound with defect at most ``lost_mass``.
    """
    if n > 6:
        raise ValueError("tiny oracle is meant for n <= 6")
    if not 0 <= r <= n:
        raise ValueError("need 0 <= r <= n")
    probs = [p for _, p in atoms]
    if abs(sum(probs) - 1.0) > 1e-12:
        raise ValueError("atom probabilities must sum to 1")
    if (z_cap + 1) ** 2 * len(atoms) ** n > 10_000_000:
        raise ValueError("state space too large")

    # per-atom transition matrices T[z, z'] for one generation
    mats = {}
    for xval, _ in atoms:
        mean = math.exp(xval)
        pmf = _offspring_pmf(family, mean, z_cap)
        T = np.zeros((z_cap + 1, z_cap + 1))
        T[0, 0] = 1.0
        row = np.zeros(z_cap + 1)
        row[0] = 1.0
        for z in range(1, z_cap + 1):
            row = np.convolve(row, pmf)[:z_cap + 1]
            T[z] = row
        mats[xval] = T

    joint = {}
    p_accept = 0.0
    p_surv = 0.0
    lost = 0.0
    total = 0.0
    for seq in itertools.product(range(len(atoms)), repeat=n):
        p_env = math.prod(probs[i] for i in seq)
        xs = [atoms[i][0] for i in seq]
        s_n = sum(xs)
        # distribution of Z_r
        d = np.zeros(z_cap + 1)
        d[z0] = 1.0
        for j in range(r):
            d = d @ mats[xs[j]]
        lost += p_env * (1.0 - d.sum())
        # extinction probability of one line over [r, n]
        env = _tiny_env(family, xs)
        q, _ = extinction_backward(env, r, n)
        zs = np.arange(z_cap + 1)
        p_surv += p_env * float((d * (1.0 - q ** zs)).sum())
        total += p_env * d.sum()
        accept_env = s_n <= x_threshold
        if accept_env:
            from scipy.stats import binom
            for z in range(1, z_cap + 1):
                if d[z] <= 0:
                    continue
                w = np.arange(1, z + 1)
                pw = binom.pmf(w, z, 1.0 - q)
                for wi, pp in zip(w, pw):
                    if pp > 0:
                        key = (z, int(wi))
                        val = p_env * d[z] * pp
                        joint[key] = joint.get(key, 0.0) + val
                        p_accept += val
    if p_accept > 0:
        joint = {k: v / p_accept for k, v in joint.items()}
    return TinyLaw(p_accept=p_accept, p_survival=p_surv, joint_given_accept=joint,
                   z_cap=z_cap, lost_mass=lost, total_mass=total + lost)


def _tiny_env(family: str, xs) -> EnvRealization:
    inc = np.asarray(xs, dtype=float)
    prefix = np.concatenate([[0.0], np.cumsum(inc)])
    return EnvRealization(family=family, increments=inc, prefix=prefix)


@dataclass(frozen=True)
class TwoPointIncrements:
    """Symmetric two-point increment law used by the tiny-oracle checks."""

    delta: float

    def sample(self, rng: np.random.Generator, size=None):
        return np.where(rng.random(size) < 0.5, self.delta, -self.delta)

    @property
    def atoms(self):
        return [(self.delta, 0.5), (-self.delta, 0.5)]


# ---------------------------------------------------------------------------
# Theta: the survival-versus-positivity constant
# ---------------------------------------------------------------------------

@dataclass
class ThetaEstimate:
    ratio_by_n: dict
    series_estimate: float
    series_terms: np.ndarray        # contribution per minimum epoch j
    series_J: int
    series_K: int
    series_trunc_mass: float        # P(tau_j = j, Z_j > K) mass dropped, j <= J
    sparr_bound: float              # MC estimate of the majorant series

    @property
    def ratio_values(self) -> np.ndarray:
        return np.asarray([v[0] for v in self.ratio_by_n.values()])


def _acceptance_probability(scenario: ScenarioSpec, n_trials: int):
    """Accepted fraction of the event {S_n <= t a_k, Z_n > 0} over n_trials."""
    chunks = max(1, math.ceil(n_trials / CHUNK_SIZE))
    acc = surv = trials = 0
    for i in range(chunks):
        b = run_chunk_lf(scenario, i)
        acc += b.n_accepted
        surv += b.n_survived
        trials += b.n_trials
    return acc / trials, surv / trials, trials


def estimate_theta(model: EnvironmentModel, n_grid: Sequence[int],
                   k_of_n: Callable[[int], int], t: float,
                   table: RenewalTable, seed: int = 0,
                   trials_per_n: int = 4_000_000, series_J: int = 30,
                   series_K: int = 1000, series_envs: int = 1500,
                   series_horizon: int = 2000,
                   chain_trials: int = 300_000) -> ThetaEstimate:
    """Estimate the constant relating P(S_n <= t a_k, Z_n > 0) to the walk event.

    Ratio method: accepted fraction divided by the measured probability of
    {S_n <= t a_k, min >= 0} at each n.  Series method: sum over early
    minimum epochs j of P(Z_j = i, tau_j = j) times the probability that i
    lines survive forever in an environment conditioned to stay nonnegative
    (V-weighted, horizon-truncated).  The majorant sum E[e^{S_j}; M_j < 0]
    is estimated alongside as the upper bound.
    """
    spec = model.increment_spec
    rng = _chunk_rng(seed, 10_001)

    ratio_by_n = {}
    for n in n_grid:
        scen = ScenarioSpec(model=model, n=int(n), regime="walk_only",
                            k=k_of_n(int(n)), t=t, seed=seed,
                            target_accepted=1, max_trials=trials_per_n)
        p_acc, _, trials = _acceptance_probability(scen, trials_per_n)
        b = event_b_probability(spec, scen.x_threshold, int(n),
                                max(200_000, trials_per_n // 4), rng, table)
        theta_hat = p_acc / b.estimate if b.estimate > 0 else math.nan
        se = theta_hat * math.sqrt(max(1.0 / max(p_acc * trials, 1.0)
                                       + 1.0 / max(b.n_accepted, 1), 1e-12))
        ratio_by_n[int(n)] = (theta_hat, se)

    # joint law of (Z_j = i, tau_j = j) for j <= J, i <= K by plain simulation
    pj = np.zeros((series_J + 1, series_K + 1))
    trunc_mass = 0.0
    pj[0, 1] = 1.0  # Z_0 = 1 and tau_0 = 0 by construction
    for start in range(0, chain_trials, 50_000):
        mtr = min(50_000, chain_trials - start)
        inc = spec.sample(rng, size=(series_J, mtr))
        S = np.cumsum(inc, axis=0)
        run_min_prev = np.minimum.accumulate(np.vstack([np.zeros(mtr), S]), axis=0)[:-1]
        z = np.full(mtr, 1.0)
        means = np.exp(inc)
        for j in range(1, series_J + 1):
            alive = z > 0
            if model.family == "linear_fractional":
                p = means[j - 1] / (1.0 + means[j - 1])
                z[alive] = _nb_failures(rng, z[alive].astype(np.int64), 1.0 - p[alive])
            else:
                z[alive] = rng.poisson(z[alive] * means[j - 1][alive])
            is_min = (S[j - 1] < run_min_prev[j - 1]) & (S[j - 1] < 0)
            hit = is_min & (z >= 1)
            if hit.any():
                zi = z[hit]
                small = zi <= series_K
                vals, counts = np.unique(zi[small].astype(np.int64), return_counts=True)
                pj[j, vals] += counts
                trunc_mass += int((~small).sum())
    pj[1:, :] /= chain_trials
    trunc_mass /= chain_trials

    # survival-forever probabilities in the V-weighted nonnegative environment
    ends, envs_inc = _positive_environments(spec, series_envs, series_horizon, rng)
    weights = table.v_minus_at(ends)
    log_ext = np.empty(len(envs_inc))
    for i, inc in enumerate(envs_inc):
        env = EnvRealization(family=model.family, increments=inc,
                             prefix=np.concatenate([[0.0], np.cumsum(inc)]))
        q, _ = extinction_backward(env, 0, len(inc))
        log_ext[i] = math.log(q) if q > 0 else -math.inf
    i_grid = np.arange(1, series_K + 1)
    # P(i lines all die) = q^i; weighted average over environments
    surv_i = np.array([
        float(np.sum(weights * -np.expm1(np.minimum(i * log_ext, 0.0))) / weights.sum())
        for i in i_grid])

    series_terms = (pj[:, 1:] * surv_i[None, :]).sum(axis=1)
    series_estimate = float(series_terms.sum())

    j_vals, ew = _sparr_majorant(spec, series_J, rng)
    sparr = float(ew.sum())
    # regular-variation tail beyond J from the last decade of points
    tail_j = j_vals[j_vals >= max(4, series_J // 2)]
    if len(tail_j) >= 3:
        c_fit = np.median(ew[np.searchsorted(j_vals, tail_j)]
                          * tail_j ** (1.0 + 1.0 / spec.alpha))
        sparr += float(c_fit * np.sum(np.arange(series_J + 1, 100_000)
                                      ** (-(1.0 + 1.0 / spec.alpha))))
    return ThetaEstimate(ratio_by_n=ratio_by_n, series_estimate=series_estimate,
                         series_terms=series_terms, series_J=series_J,
                         series_K=series_K, series_trunc_mass=float(trunc_mass),
                         sparr_bound=sparr)


def _positive_environments(spec, n_envs, horizon, rng):
    """Increment sequences of walks conditioned nonnegative over the horizon."""
    kept_inc = []
    ends = []
    batch = 30_000
    for _ in range(2000):
        inc = spec.sample(rng, size=(batch, horizon))
        cs = np.cumsum(inc, axis=1)
        ok = cs.min(axis=1) >= 0.0
        for row in np.flatnonzero(ok):
            kept_inc.append(inc[row].copy())
            ends.append(cs[row, -1])
            if len(kept_inc) >= n_envs:
                return np.asarray(ends), kept_inc
    if len(kept_inc) < max(50, n_envs // 10):
        raise InsufficientAcceptance(
            f"conditioning kept {len(kept_inc)} environments of {n_envs} requested")
    return np.asarray(ends), kept_inc


def _sparr_majorant(spec, J, rng, n_walks=400_000):
    from .walk import exp_weighted_negative_max
    j_vals = np.arange(1, J + 1)
    jv, ew = exp_weighted_negative_max(spec, j_vals, n_walks, rng)
    full = np.concatenate([[1.0], ew])  # j = 0 term is E[e^{S_0}] = 1
    return np.concatenate([[0], jv]), full


# ---------------------------------------------------------------------------
# diagnostics on accepted batches
# ---------------------------------------------------------------------------

@dataclass
class DiagnosticsReport:
    n: int
    m: int
    count: int
    abs_delta_scaled_q: dict          # quantiles of |Delta_{r,n}| / a_m
    log_o_scaled_q: dict              # quantiles of log O_{r,n} / a_m
    binom_dev_q: dict                 # standardized |Z_rn - Z_r(1-q)| quantiles
    binom_dev_frac_below_2: float
    log_mart_ratio_q: dict            # quantiles of log(Z_r / e^{S_r})
    max_delta_recompute_err: float


_QS = (0.5, 0.9, 0.95)


def _qdict(x: np.ndarray) -> dict:
    return {q: float(np.quantile(x, q)) for q in _QS}


def diagnostics_check(batch: SampleBatch, min_samples: int = 1000) -> DiagnosticsReport:
    """Scaled-diagnostic quantiles for one accepted batch.

    Covers the negligibility of Delta_{r,n}/a_m, the tightness of
    log O_{r,n}/a_m, the binomial concentration of the reduced count, and
    the stabilization of the martingale ratio Z_r / e^{S_r}.
    """
    if batch.n_accepted < min_samples:
        raise InsufficientAcceptance(
            f"diagnostics need >= {min_samples} accepted samples, got {batch.n_accepted}")
    scen = batch.scenario
    a_m = norming(scen.spec, max(scen.m, 1))
    z_r = batch.field_array("Z_r")
    z_rn = batch.field_array("Z_rn")
    q = batch.field_array("q_rn")
    s_r = batch.field_array("S_r")
    s_tau = batch.field_array("S_tau")
    o_rn = batch.field_array("O_rn")
    delta = batch.field_array("Delta_rn")

    mean_red = z_r * (1.0 - q)
    dev = np.abs(z_rn - mean_red) / np.sqrt(np.maximum(mean_red, 1e-300))
    with np.errstate(divide="ignore"):
        recomputed = np.log(z_r) + np.log1p(-q) - s_tau
    ok = np.isfinite(recomputed)
    recompute_err = float(np.max(np.abs(recomputed[ok] - delta[ok]))) if ok.any() else math.inf
    return DiagnosticsReport(
        n=scen.n, m=scen.m, count=batch.n_accepted,
        abs_delta_scaled_q=_qdict(np.abs(delta) / a_m),
        log_o_scaled_q=_qdict(np.log(o_rn) / a_m),
        binom_dev_q=_qdict(dev),
        binom_dev_frac_below_2=float(np.mean(dev < 2.0)),
        log_mart_ratio_q=_qdict(np.log(np.maximum(z_r, 1e-300)) - s_r),
        max_delta_recompute_err=recompute_err)
