"""Random-walk toolkit: minima, ladder structure, renewal tables, conditioning.

The walk S_0 = 0, S_n = X_1 + ... + X_n drives everything downstream.  This
module covers simulation, window minima and argmins, weak/strict ladder
decomposition, Monte Carlo renewal-function tables V+/V- together with their
regular-variation diagnostics, sampling of the walk conditioned to stay
nonnegative (V-weighted law), and the joint small-endpoint/positivity event

    B(x, n) = {S_n <= x, min_{0<=i<=n} S_i >= 0}

whose probability is compared against the first-order prediction
g(0) V-(0) b_n Integral_0^x V+(u) du with b_n = 1/(n a_n).
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .stable import (InsufficientAcceptance, StableSpec, b_norming, norming,
                     sample_increment, stable_density)


@dataclass(frozen=True)
class WalkPath:
    """Increment sequence with its prefix sums (prefix[0] = 0)."""

    increments: np.ndarray
    prefix: np.ndarray

    @classmethod
    def from_increments(cls, increments) -> "WalkPath":
        inc = np.asarray(increments, dtype=float)
        prefix = np.empty(len(inc) + 1)
        prefix[0] = 0.0
        np.cumsum(inc, out=prefix[1:])
        return cls(increments=inc, prefix=prefix)

    @property
    def n(self) -> int:
        return len(self.increments)


def simulate_walk(spec: StableSpec, n: int, rng: np.random.Generator) -> WalkPath:
    if n < 0:
        raise ValueError("n must be >= 0")
    return WalkPath.from_increments(sample_increment(spec, rng, size=n))


class MinStats(NamedTuple):
    l_rn: float   # min over indices r..n
    tau_rn: int   # first index in [r, n] attaining the minimum
    m_n: float    # max over indices 1..n (-inf for n = 0)


def min_stats(path: WalkPath, r: int = 0) -> MinStats:
    """Window minimum, first argmin, and global max of a realized path."""
    n = path.n
    if not 0 <= r <= n:
        raise ValueError(f"need 0 <= r <= n, got r={r}, n={n}")
    window = path.prefix[r:n + 1]
    i = int(np.argmin(window))  # argmin returns the first minimizer
    m_n = float(path.prefix[1:].max()) if n >= 1 else -math.inf
    return MinStats(l_rn=float(window[i]), tau_rn=r + i, m_n=m_n)


@dataclass
class LadderStats:
    """Weak ladder epochs/heights of one path, with the tie-probability estimate."""

    weak_desc_epochs: np.ndarray
    desc_heights: np.ndarray     # H_k^- = -S at descending epochs, nondecreasing
    weak_asc_epochs: np.ndarray
    asc_heights: np.ndarray
    zeta_estimate: float         # fraction of weak epochs that are ties


def _weak_records(prefix: np.ndarray, descending: bool):
    s = -prefix if descending else prefix
    # epoch at i >= 1 iff S_i >= max(S_0..S_{i-1}) (weak, ties included)
    before = np.maximum.accumulate(s)[:-1]
    idx = 1 + np.flatnonzero(s[1:] >= before)
    return idx, s[idx]


def ladder_decompose(path: WalkPath) -> LadderStats:
    if path.n < 1:
        raise ValueError("path must contain at least one increment")
    d_idx, d_h = _weak_records(path.prefix, descending=True)
    a_idx, a_h = _weak_records(path.prefix, descending=False)
    ties = 0
    total = 0
    for idx, h in ((d_idx, d_h), (a_idx, a_h)):
        if len(h):
            prev = np.concatenate([[0.0], h[:-1]])
            ties += int(np.count_nonzero(h == prev))
            total += len(h)
    zeta = ties / total if total else 0.0
    return LadderStats(weak_desc_epochs=d_idx, desc_heights=d_h,
                       weak_asc_epochs=a_idx, asc_heights=a_h,
                       zeta_estimate=zeta)


@dataclass
class LadderHeightSample:
    """Ladder heights of one walk, gathered until they exceed a target level."""

    weak_heights: np.ndarray    # includes the k = 0 height 0
    ties: int                   # number of weak epochs with zero height gain
    truncated: bool             # horizon hit before the level was exceeded


def gather_ladder_heights(sampler, n_walks: int, level: float,
                          rng: np.random.Generator, side: str = "desc",
                          horizon: int = 2_000_000,
                          block: int = 8192) -> list[LadderHeightSample]:
    """Simulate walks, recording weak ladder heights up to ``level`` per walk.

    ``sampler`` is anything with .sample(rng, size); ``side`` selects the
    descending (heights -S at new minima) or ascending ladder.  Each walk
    runs until its ladder height exceeds ``level`` so counts below the level
    are complete; walks hitting ``horizon`` first are flagged truncated.
    """
    sign = -1.0 if side == "desc" else 1.0
    out = []
    for _ in range(n_walks):
        cur = 0.0
        heights = [0.0]
        ties = 0
        steps = 0
        s_end = 0.0
        truncated = True
        while steps < horizon:
            x = sign * np.asarray(sampler.sample(rng, size=block), dtype=float)
            cs = np.cumsum(x) + s_end
            s_end = cs[-1]
            steps += block
            # weak record at i iff s_i >= max of everything before it
            before = np.maximum.accumulate(np.concatenate([[cur], cs]))[:-1]
            mask = cs >= before
            if mask.any():
                vals = cs[mask]
                ties += int(np.count_nonzero(vals == before[mask]))
                heights.extend(vals.tolist())
                cur = float(max(cur, vals[-1]))
            if cur > level:
                truncated = False
                break
        out.append(LadderHeightSample(weak_heights=np.asarray(heights),
                                      ties=ties, truncated=truncated))
    return out


@dataclass
class RenewalTable:
    """Monte Carlo estimates of the renewal functions V+/V- on a grid.

    V(x) is the expected number of weak ladder heights <= x including the
    zeroth height, so V(0) = 1/(1 - zeta) and both columns are nondecreasing
    by construction.  ``alpha_rho`` is carried along for the integral ratio
    diagnostic when the generating spec is known.
    """

    grid: np.ndarray
    v_plus: np.ndarray
    v_minus: np.ndarray
    zeta: float
    n_ladder_samples: int
    truncated_plus: int = 0
    truncated_minus: int = 0
    alpha_rho: float | None = None

    def __post_init__(self):
        for name in ("v_plus", "v_minus"):
            col = getattr(self, name)
            if np.any(np.diff(col) < -1e-12):
                raise ValueError(f"{name} must be nondecreasing")

    def v_plus_at(self, x):
        return _interp_extend(x, self.grid, self.v_plus)

    def v_minus_at(self, x):
        return _interp_extend(x, self.grid, self.v_minus)

    def integral_v_plus(self, x: float) -> float:
        """Trapezoid integral of V+ over [0, x], x within the grid."""
        if not (self.grid[0] <= x <= self.grid[-1]):
            raise ValueError(f"x={x} outside the table grid")
        g, v = self.grid, self.v_plus
        k = int(np.searchsorted(g, x))
        parts = np.trapezoid(v[:k], g[:k]) if k > 1 else 0.0
        if k >= 1 and x > g[k - 1]:
            vx = self.v_plus_at(x)
            parts += 0.5 * (v[k - 1] + vx) * (x - g[k - 1])
        return float(parts)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# renewal-table v1, zeta={self.zeta!r}, "
                  f"n_samples={self.n_ladder_samples}, "
                  f"truncated_plus={self.truncated_plus}, "
                  f"truncated_minus={self.truncated_minus}, "
                  f"alpha_rho={self.alpha_rho!r}\n")
        buf.write("grid,v_plus,v_minus\n")
        for g, vp, vm in zip(self.grid, self.v_plus, self.v_minus):
            buf.write(f"{g!r},{vp!r},{vm!r}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "RenewalTable":
        lines = text.strip().splitlines()
        meta = {}
        for part in lines[0].lstrip("# ").split(", ")[1:]:
            key, val = part.split("=")
            meta[key] = eval(val)  # noqa: S307 - our own header format
        rows = [tuple(float(v) for v in ln.split(",")) for ln in lines[2:]]
        arr = np.asarray(rows)
        return cls(grid=arr[:, 0], v_plus=arr[:, 1], v_minus=arr[:, 2],
                   zeta=meta["zeta"], n_ladder_samples=meta["n_samples"],
                   truncated_plus=meta["truncated_plus"],
                   truncated_minus=meta["truncated_minus"],
                   alpha_rho=meta["alpha_rho"])


def _interp_extend(x, grid, vals):
    """Linear interpolation with linear extension beyond the last grid cell."""
    x = np.asarray(x, dtype=float)
    out = np.interp(x, grid, vals)
    if grid[-1] > grid[0]:
        slope = (vals[-1] - vals[-2]) / (grid[-1] - grid[-2])
        hi = x > grid[-1]
        if np.any(hi):
            out = np.where(hi, vals[-1] + slope * (x - grid[-1]), out)
    return out if out.ndim else float(out)


def estimate_renewal(asc_samples: Sequence[LadderHeightSample],
                     desc_samples: Sequence[LadderHeightSample],
                     grid, alpha_rho: float | None = None) -> RenewalTable:
    """Average ladder-height counts over independent walks into a table."""
    grid = np.asarray(grid, dtype=float)
    if len(asc_samples) < 1000 or len(desc_samples) < 1000:
        raise InsufficientAcceptance(
            "need >= 1000 ladder-height sequences per side "
            f"(got {len(asc_samples)}, {len(desc_samples)})")

    def column(samples):
        counts = np.zeros(len(grid))
        ties = total = 0
        trunc = 0
        for s in samples:
            counts += np.searchsorted(s.weak_heights, grid, side="right")
            ties += s.ties
            total += len(s.weak_heights) - 1
            trunc += s.truncated
        return counts / len(samples), ties, total, trunc

    vp, ties_p, tot_p, trunc_p = column(asc_samples)
    vm, ties_m, tot_m, trunc_m = column(desc_samples)
    total = tot_p + tot_m
    zeta = (ties_p + ties_m) / total if total else 0.0
    return RenewalTable(grid=grid, v_plus=vp, v_minus=vm, zeta=zeta,
                        n_ladder_samples=len(asc_samples) + len(desc_samples),
                        truncated_plus=trunc_p, truncated_minus=trunc_m,
                        alpha_rho=alpha_rho)


def build_renewal_table(spec: StableSpec, grid, n_walks: int,
                        rng: np.random.Generator,
                        horizon: int = 2_000_000) -> RenewalTable:
    """Convenience wrapper: gather both ladder sides for ``spec`` and tabulate."""
    grid = np.asarray(grid, dtype=float)
    level = float(grid[-1])
    asc = gather_ladder_heights(spec, n_walks, level, rng, side="asc", horizon=horizon)
    desc = gather_ladder_heights(spec, n_walks, level, rng, side="desc", horizon=horizon)
    return estimate_renewal(asc, desc, grid, alpha_rho=spec.alpha_rho)


def asympv_ratio(table: RenewalTable, x: float, alpha_rho: float | None = None) -> float:
    """(alpha rho + 1) Integral_0^x V+ / (x V+(x)); tends to 1 for large x."""
    ar = alpha_rho if alpha_rho is not None else table.alpha_rho
    if ar is None:
        raise ValueError("alpha_rho unknown: pass it or build the table from a spec")
    if x <= 0:
        raise ValueError("x must be positive")
    return (ar + 1.0) * table.integral_v_plus(x) / (x * float(table.v_plus_at(x)))


def ladder_epoch_exceedance(spec: StableSpec, abscissae, n_walks: int,
                            rng: np.random.Generator, side: str = "asc",
                            block: int = 64):
    """Monte Carlo survival counts P(tau_1 > n) of the first weak ladder epoch.

    Returns (abscissae, counts, n_walks); feed into stats.tail_index_fit.
    The first epoch on the ascending side is the first i with S_i >= 0.
    """
    abscissae = np.asarray(sorted(abscissae), dtype=int)
    horizon = int(abscissae[-1])
    sign = 1.0 if side == "asc" else -1.0
    taus = np.full(n_walks, horizon + 1, dtype=np.int64)
    done = 0
    chunk = 20_000
    while done < n_walks:
        m = min(chunk, n_walks - done)
        S = np.zeros(m)
        alive = np.arange(m)
        j = 0
        while j < horizon and alive.size:
            b = min(block, horizon - j)
            X = sign * sample_increment(spec, rng, size=(b, alive.size))
            cs = np.cumsum(X, axis=0) + S[alive]
            hit = cs.max(axis=0) >= 0.0
            if hit.any():
                sub = cs[:, hit] >= 0.0
                first = np.argmax(sub, axis=0)
                taus[done + alive[hit]] = j + first + 1
            S[alive] = cs[-1]
            alive = alive[~hit]
            j += b
        done += m
    counts = (taus[None, :] > abscissae[:, None]).sum(axis=1)
    return abscissae, counts, n_walks


def conditioned_sample_positive(spec: StableSpec, n: int, x0: float,
                                rng: np.random.Generator, method: str,
                                table: RenewalTable | None = None,
                                size: int = 1, keep_paths: bool = False,
                                stage: int = 25, oversample: int = 4):
    """Sample the walk started at x0 >= 0 under the V-weighted positive law.

    The target assigns a path the plain-walk density reweighted by
    V-(S_n) 1{min >= 0} / V-(x0).  Two constructions:

    - "rejection": simulate plain walks, keep those staying nonnegative,
      then importance-resample the survivors with weights V-(S_n).  The
      reference oracle; acceptance decays like a negative power of n.
    - "h-transform": sequential importance resampling driven by the table,
      with per-stage weights V-(S_end) 1{stage min >= 0} / V-(S_start); the
      telescoping product reproduces the same path law without rejection.

    Returns endpoints (shape (size,)), or (endpoints, paths) when
    ``keep_paths`` where paths has shape (size, n + 1).
    """
    if x0 < 0:
        raise ValueError("x0 must be >= 0")
    if n < 1:
        raise ValueError("n must be >= 1")
    if table is None:
        raise ValueError("a RenewalTable for V- is required")
    vminus = table.v_minus_at

    if method == "rejection":
        need = size * oversample
        ends = []
        paths = []
        got = 0
        batch = max(4096, min(200_000, need * 64))
        for _ in range(10_000):
            S = np.full(batch, float(x0))
            P = np.zeros((batch, n + 1)) if keep_paths else None
            if keep_paths:
                P[:, 0] = x0
            alive = np.arange(batch)
            j = 0
            while j < n and alive.size:
                b = min(64, n - j)
                X = sample_increment(spec, rng, size=(b, alive.size))
                cs = np.cumsum(X, axis=0) + S[alive]
                keep = cs.min(axis=0) >= 0.0
                if keep_paths:
                    P[alive, j + 1:j + b + 1] = cs.T
                S[alive] = cs[-1]
                alive = alive[keep]
                j += b
            ends.append(S[alive].copy())
            if keep_paths:
                paths.append(P[alive].copy())
            got += alive.size
            if got >= need:
                break
        if got < max(size, 10):
            raise InsufficientAcceptance(
                f"rejection retained {got} paths, need >= {size}")
        ends = np.concatenate(ends)
        w = vminus(ends)
        idx = rng.choice(len(ends), size=size, p=w / w.sum())
        if keep_paths:
            return ends[idx], np.concatenate(paths)[idx]
        return ends[idx]

    if method == "h-transform":
        m = size
        S = np.full(m, float(x0))
        P = None
        if keep_paths:
            P = np.zeros((m, n + 1))
            P[:, 0] = x0
        logw = np.zeros(m)
        filled = 0
        for j0 in range(0, n, stage):
            b = min(stage, n - j0)
            X = sample_increment(spec, rng, size=(b, m))
            cs = np.cumsum(X, axis=0) + S
            ok = cs.min(axis=0) >= 0.0
            if not ok.any():
                raise InsufficientAcceptance(
                    f"every particle left [0, inf) in steps [{j0}, {j0 + b})")
            with np.errstate(divide="ignore"):
                logw += np.where(ok, np.log(vminus(cs[-1]) / vminus(S)), -np.inf)
            if keep_paths:
                P[:, filled + 1:filled + b + 1] = cs.T
            S = cs[-1]
            filled += b
            w = np.exp(logw - logw.max())
            ess = w.sum() ** 2 / np.square(w).sum()
            if ess < 0.5 * m or j0 + b >= n:
                idx = _systematic_resample(w, m, rng)
                S = S[idx]
                if keep_paths:
                    P = P[idx]
                logw[:] = 0.0
        if keep_paths:
            return S, P
        return S

    raise ValueError(f"unknown method {method!r}")


def _systematic_resample(w: np.ndarray, size: int, rng: np.random.Generator):
    pos = (rng.random() + np.arange(size)) / size
    return np.searchsorted(np.cumsum(w) / w.sum(), pos)


@dataclass
class BEventResult:
    estimate: float
    ci_low: float
    ci_high: float
    prediction: float
    n_trials: int
    n_accepted: int

    @property
    def ratio(self) -> float:
        return self.estimate / self.prediction if self.prediction > 0 else math.nan


def event_b_probability(spec: StableSpec, x: float, n: int, n_trials: int,
                        rng: np.random.Generator, table: RenewalTable,
                        z_conf: float = 2.5758) -> BEventResult:
    """P(S_n <= x, min >= 0) by conditioned Monte Carlo, with its prediction.

    Walks die as soon as they go negative, so the cost per trial is the
    survival-weighted path length.  The prediction is
    g(0) V-(0) b_n Integral_0^x V+(u) du from the renewal table.  A zero
    acceptance count is reported as estimate 0 with a one-sided interval.
    """
    accepted = 0
    if x >= 0:
        done = 0
        chunk = 40_000
        while done < n_trials:
            m = min(chunk, n_trials - done)
            S = np.zeros(m)
            alive = np.arange(m)
            j = 0
            b = 8  # most walks dip below 0 almost immediately
            while j < n and alive.size:
                b = min(b, n - j)
                X = sample_increment(spec, rng, size=(b, alive.size))
                cs = np.cumsum(X, axis=0) + S[alive]
                keep = cs.min(axis=0) >= 0.0
                S[alive] = cs[-1]
                alive = alive[keep]
                j += b
                b = min(64, 2 * b)
            accepted += int(np.count_nonzero(S[alive] <= x))
            done += m
    p = accepted / n_trials
    half = z_conf * math.sqrt(max(p * (1 - p), 1.0 / n_trials) / n_trials)
    pred = (stable_density(spec, 0.0) * float(table.v_minus_at(0.0))
            * b_norming(spec, n) * table.integral_v_plus(max(x, 0.0))) if x >= 0 else 0.0
    return BEventResult(estimate=p, ci_low=max(0.0, p - half), ci_high=min(1.0, p + half),
                        prediction=pred, n_trials=n_trials, n_accepted=accepted)


def exp_weighted_negative_max(spec: StableSpec, j_values, n_walks: int,
                              rng: np.random.Generator):
    """Estimate E[e^{S_j}; max(S_1..S_j) < 0] for each j (bounded by 1).

    Walks are killed once they touch [0, inf); on the surviving event
    e^{S_j} <= 1 so plain averaging is stable.
    """
    j_values = np.asarray(sorted(j_values), dtype=int)
    horizon = int(j_values[-1])
    sums = np.zeros(len(j_values))
    done = 0
    chunk = 20_000
    while done < n_walks:
        m = min(chunk, n_walks - done)
        S = np.zeros(m)
        alive = np.arange(m)
        j = 0
        next_i = 0
        while j < horizon and alive.size:
            b = min(16, horizon - j)
            X = sample_increment(spec, rng, size=(b, alive.size))
            cs = np.cumsum(X, axis=0) + S[alive]
            blockmax = np.maximum.accumulate(cs, axis=0)
            for step in range(b):
                while next_i < len(j_values) and j_values[next_i] == j + step + 1:
                    ok = blockmax[step] < 0.0  # alive rows had M < 0 before block
                    sums[next_i] += np.exp(cs[step][ok]).sum()
                    next_i += 1
            keep = blockmax[-1] < 0.0
            S[alive] = cs[-1]
            alive = alive[keep]
            j += b
        done += m
    return j_values, sums / n_walks
