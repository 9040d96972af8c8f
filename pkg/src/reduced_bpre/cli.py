"""Experiment runner: configuration, deterministic parallel execution, reports.

A run is a pure function of (config, seed): trials are split into
fixed-size chunks whose random streams derive from (seed, chunk index), and
chunk results are consumed in index order, so emitted files are
byte-identical for any worker count.  Exit codes: 0 all report rows pass,
1 at least one statistical failure, 2 configuration or usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import bpre, limits, stats, walk
from .envs import EnvironmentModel
from .stable import (MeanderTable, StableSpec, default_scale, meander_density,
                     min_and_endpoint_sampler, norming)

VERSION = "0.1.0"

SCENARIO_ALIASES = {
    "thm1": "thm1_small_tail",
    "thm2": "thm2_theta_m",
    "thm3_k_gg_r": "thm3_k_gg_r",
    "thm3_theta_r": "thm3_theta_r",
    "thm3_min_gg_k": "thm3_min_gg_k",
    "walk_only": "walk_only",
}
ENV_ALIASES = {"geometric": "linear_fractional", "linear_fractional": "linear_fractional",
               "poisson": "poisson"}

THEOREM_BY_REGIME = {
    "thm1_small_tail": "T1",
    "thm2_theta_m": "T2",
    "thm3_k_gg_r": "T3.1",
    "thm3_theta_r": "T3.2",
    "thm3_min_gg_k": "T3.3",
    "walk_only": "walk",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Validated run parameters; every field has a documented default except seed."""

    scenario: str
    n: int
    seed: int
    k: int | None = None
    r: int | None = None
    theta: float = 1.0
    t: float = 1.0
    alpha: float = 2.0
    beta: float = 0.0
    c: float | None = None
    env: str = "linear_fractional"
    trials: int = 200_000_000
    target_accepted: int = 2000
    threads: int = 1
    out_dir: str = "."
    format: str = "csv"
    ks_tolerance: float = 0.2
    paths: int = 100_000          # path-ensemble size
    grid_steps: int = 1000        # path-ensemble time resolution
    quad_nodes: int = 256
    meander_paths: int = 100_000
    meander_length: int = 10_000

    def __post_init__(self):
        if self.scenario not in SCENARIO_ALIASES.values():
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.env not in ENV_ALIASES.values():
            raise ConfigError(f"unknown env family {self.env!r}")
        if self.format not in ("csv", "json"):
            raise ConfigError(f"format must be csv or json, got {self.format!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        if self.seed is None:
            raise ConfigError("seed is mandatory")
        try:
            self.stable_spec()
            self.scenario_spec()
        except (ValueError, ConfigError) as exc:
            raise ConfigError(str(exc)) from exc

    def stable_spec(self) -> StableSpec:
        c = self.c if self.c is not None else default_scale(self.alpha)
        return StableSpec(self.alpha, self.beta, c)

    def environment_model(self) -> EnvironmentModel:
        return EnvironmentModel(family=self.env, increment_spec=self.stable_spec())

    def scenario_spec(self) -> bpre.ScenarioSpec:
        return bpre.ScenarioSpec(model=self.environment_model(), n=self.n,
                                 regime=self.scenario, t=self.t, theta=self.theta,
                                 k=self.k, r=self.r,
                                 target_accepted=self.target_accepted,
                                 max_trials=self.trials, seed=self.seed)

    def canonical_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            val = getattr(self, f.name)
            if val is None:
                continue
            lines.append(f"{f.name} = {val}")
        return "\n".join(lines) + "\n"


_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}
_INT_FIELDS = {"n", "seed", "k", "r", "trials", "target_accepted", "threads",
               "paths", "grid_steps", "quad_nodes", "meander_paths", "meander_length"}
_FLOAT_FIELDS = {"theta", "t", "alpha", "beta", "c", "ks_tolerance"}


def _coerce(key: str, value: str):
    if key in _INT_FIELDS:
        return int(value)
    if key in _FLOAT_FIELDS:
        return float(value)
    return value


def parse_config(text: str | None = None, overrides: dict | None = None) -> RunConfig:
    """Build a RunConfig from flat ``key = value`` text plus flag overrides.

    Unknown keys are rejected; flag values win over file values; scenario
    and env aliases are normalized here.
    """
    raw: dict = {}
    if text is not None:
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            try:
                raw[key] = _coerce(key, val)
            except ValueError as exc:
                raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from exc
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown key {key!r}")
        raw[key] = _coerce(key, str(val)) if isinstance(val, str) else val
    if "scenario" in raw:
        raw["scenario"] = SCENARIO_ALIASES.get(raw["scenario"], raw["scenario"])
    if "env" in raw:
        raw["env"] = ENV_ALIASES.get(raw["env"], raw["env"])
    missing = {"scenario", "n", "seed"} - raw.keys()
    if missing:
        raise ConfigError(f"missing mandatory keys: {sorted(missing)}")
    try:
        return RunConfig(**raw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------

def _pool_map(threads: int):
    if threads <= 1:
        return map, None
    pool = ProcessPoolExecutor(max_workers=threads)
    return (lambda fn, xs: pool.map(fn, xs, chunksize=1)), pool


def collect_samples(config: RunConfig) -> bpre.SampleBatch:
    scenario = config.scenario_spec()
    threads = int(os.environ.get("REDUCED_BPRE_THREADS", config.threads))
    map_fn, pool = _pool_map(threads)
    try:
        return bpre.run_scenario_samples(scenario, map_fn=map_fn)
    finally:
        if pool is not None:
            pool.shutdown()


def _renewal_grid_max(config: RunConfig, scenario) -> float:
    return max(1.5 * scenario.x_threshold, 25.0)


@dataclass
class RunResult:
    rows: list
    files: dict
    exit_code: int


def run_scenario(config: RunConfig) -> RunResult:
    """Execute the configured pipeline and write its report files."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scenario = config.scenario_spec()
    spec = scenario.spec
    rng = np.random.Generator(np.random.Philox(
        np.random.SeedSequence(entropy=(config.seed, 0xA115))))
    files: dict[str, Path] = {}
    rows: list[stats.ReportRow] = []

    grid_max = _renewal_grid_max(config, scenario)
    table = walk.build_renewal_table(
        spec, np.linspace(0.0, grid_max, 200),
        n_walks=1200, rng=rng, horizon=int(4e6))
    files["renewal"] = out_dir / "renewal_table.csv"
    files["renewal"].write_text(table.to_csv())

    theorem = THEOREM_BY_REGIME[scenario.regime]

    if scenario.regime == "walk_only":
        rows.extend(_walk_only_rows(config, scenario, table, rng))
        law_table = None
        batch = None
    else:
        batch = collect_samples(config)
        files["samples"] = out_dir / "accepted_samples.csv"
        files["samples"].write_text(_samples_csv(batch))
        law_table, rows_s = _theorem_rows(config, scenario, batch, rng)
        rows.extend(rows_s)
        if law_table is not None:
            files["law"] = out_dir / "limit_law.csv"
            files["law"].write_text(law_table.to_csv())

    report_path, code = emit_report(rows, config, out_dir)
    files["report"] = report_path
    return RunResult(rows=rows, files=files, exit_code=code)


def _walk_only_rows(config, scenario, table, rng):
    spec = scenario.spec
    rows = []
    absc = np.unique(np.geomspace(10, min(scenario.n, 10_000), 20).astype(int))
    a, counts, n_tot = walk.ladder_epoch_exceedance(spec, absc, 150_000, rng)
    slope, se = stats.tail_index_fit(a, counts, n_tot)
    rho = spec.rho
    rows.append(stats.ReportRow(
        scenario=scenario.regime, theorem="ladder-tail", n=scenario.n, k=scenario.k,
        r=scenario.r, t=config.t, accepted=int(counts[0]),
        statistic="tau_plus_tail_index", value=-slope, ci_low=-slope - 2 * se,
        ci_high=-slope + 2 * se, reference=rho, passed=abs(-slope - rho) <= 0.1))
    x_hi = float(np.quantile(table.grid, 0.9))
    ratio = walk.asympv_ratio(table, x_hi)
    rows.append(stats.ReportRow(
        scenario=scenario.regime, theorem="renewal-integral", n=scenario.n,
        k=scenario.k, r=scenario.r, t=config.t, accepted=table.n_ladder_samples,
        statistic="asympv_ratio", value=ratio, ci_low=ratio, ci_high=ratio,
        reference=1.0, passed=0.95 <= ratio <= 1.05))
    b = walk.event_b_probability(spec, scenario.x_threshold, scenario.n,
                                 1_000_000, rng, table)
    rows.append(stats.ReportRow(
        scenario=scenario.regime, theorem="B-asymptotic", n=scenario.n,
        k=scenario.k, r=scenario.r, t=config.t, accepted=b.n_accepted,
        statistic="estimate_over_prediction", value=b.ratio,
        ci_low=b.ci_low / b.prediction if b.prediction else math.nan,
        ci_high=b.ci_high / b.prediction if b.prediction else math.nan,
        reference=1.0, passed=0.8 <= b.ratio <= 1.25))
    return rows


def _reference_grid(scenario) -> np.ndarray:
    if scenario.regime == "thm1_small_tail":
        return np.linspace(-4.0, 1.0, 81)
    if scenario.regime in ("thm2_theta_m", "thm3_min_gg_k"):
        hi = scenario.t * (1.0 + 1e-9)
        return np.linspace(0.0, hi, 81)
    # H and W laws live on [0, inf); cover the bulk generously
    return np.linspace(0.0, 6.0, 81)


def _theorem_rows(config, scenario, batch, rng):
    spec = scenario.spec
    regime = scenario.regime
    ensemble = None
    meander = None
    if regime == "thm2_theta_m" or (regime == "thm1_small_tail" and spec.alpha != 2.0):
        ensemble = min_and_endpoint_sampler(spec, config.grid_steps, config.paths, rng)
    if regime in ("thm3_k_gg_r", "thm3_theta_r"):
        zmax = 6.0 if spec.alpha == 2.0 else 12.0
        meander = meander_density(spec, np.linspace(0.0, zmax, 321),
                                  config.meander_paths, rng,
                                  walk_length=config.meander_length)
    grid = _reference_grid(scenario)
    ref_vals = limits.reference_cdf(regime, spec, scenario.t, scenario.theta,
                                    grid, ensemble=ensemble, meander=meander)
    law_ids = {"thm1_small_tail": "Q_min", "thm2_theta_m": "A",
               "thm3_k_gg_r": "H_Cstar", "thm3_theta_r": "W",
               "thm3_min_gg_k": "tail_closed"}
    err = (ensemble.error_halfwidth if ensemble is not None else 0.0)
    law = limits.LimitLawTable(law_id=law_ids[regime], arg1=grid,
                               arg2=np.full_like(grid, scenario.t),
                               values=np.clip(ref_vals, 0.0, 1.0),
                               errors=np.full_like(grid, err),
                               meta={"theta": scenario.theta, "t": scenario.t})

    if regime == "thm1_small_tail":
        sample = batch.log_reduced_minus_sr_scaled()
    else:
        sample = batch.log_reduced_scaled()
    ecdf = stats.Ecdf(sample)
    ks = stats.ks_distance(ecdf, lambda x: np.interp(x, grid, ref_vals,
                                                     left=0.0, right=float(ref_vals[-1])))
    band = ecdf.band_halfwidth
    rows = [stats.ReportRow(
        scenario=regime, theorem=THEOREM_BY_REGIME[regime], n=scenario.n,
        k=scenario.k, r=scenario.r, t=config.t, accepted=batch.n_accepted,
        statistic="ks_distance", value=ks, ci_low=max(ks - band, 0.0),
        ci_high=ks + band, reference=0.0, passed=ks <= config.ks_tolerance)]
    rate = batch.acceptance_rate
    rows.append(stats.ReportRow(
        scenario=regime, theorem=THEOREM_BY_REGIME[regime], n=scenario.n,
        k=scenario.k, r=scenario.r, t=config.t, accepted=batch.n_accepted,
        statistic="acceptance_rate", value=rate,
        ci_low=rate * (1 - 2 / math.sqrt(max(batch.n_accepted, 1))),
        ci_high=rate * (1 + 2 / math.sqrt(max(batch.n_accepted, 1))),
        reference=rate, passed=True))
    return law, rows


SAMPLES_SCHEMA = "trial_index,S_r,S_n,S_tau,tau_rn,Z_r,q_rn,Z_rn,O_rn,Delta_rn"


def _samples_csv(batch: bpre.SampleBatch) -> str:
    lines = [f"# reduced-bpre accepted-samples schema v1 ({SAMPLES_SCHEMA})",
             SAMPLES_SCHEMA]
    for s in batch.samples:
        lines.append(f"{s.trial_index},{s.S_r!r},{s.S_n!r},{s.S_tau!r},{s.tau_rn},"
                     f"{s.Z_r!r},{s.q_rn!r},{s.Z_rn!r},{s.O_rn!r},{s.Delta_rn!r}")
    return "\n".join(lines) + "\n"


def emit_report(rows, config: RunConfig, out_dir: Path):
    """Write the comparison report; returns (path, exit_code)."""
    out_dir = Path(out_dir)
    if not rows:
        raise ConfigError("no report rows produced")
    code = 0 if all(r.passed for r in rows) else 1
    if config.format == "csv":
        path = out_dir / "report.csv"
        lines = [f"# reduced-bpre {VERSION}"]
        for line in config.canonical_text().strip().splitlines():
            lines.append(f"# {line}")
        lines.append(",".join(stats.ReportRow.FIELDS))
        lines.extend(r.as_csv() for r in rows)
        path.write_text("\n".join(lines) + "\n")
    else:
        path = out_dir / "report.json"
        payload = {"version": VERSION,
                   "config": {f.name: getattr(config, f.name)
                              for f in dataclasses.fields(config)},
                   "rows": [r.as_dict() for r in rows]}
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path, code


def build_arg_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="reduced-bpre",
        description="Conditioned reduced-process simulations and limit-law reports")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--scenario", choices=sorted(SCENARIO_ALIASES))
    p.add_argument("--n", type=int)
    p.add_argument("--k", type=int)
    p.add_argument("--r", type=int)
    p.add_argument("--theta", type=float)
    p.add_argument("--t", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--env", choices=sorted(ENV_ALIASES))
    p.add_argument("--trials", type=int)
    p.add_argument("--target-accepted", dest="target_accepted", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)
    p.add_argument("--out-dir", dest="out_dir")
    p.add_argument("--format", choices=("csv", "json"))
    return p


def main(argv=None) -> int:
    args = build_arg_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k != "config" and v is not None}
    if "scenario" in overrides:
        overrides["scenario"] = SCENARIO_ALIASES[overrides["scenario"]]
    if "env" in overrides:
        overrides["env"] = ENV_ALIASES[overrides["env"]]
    text = None
    if args.config:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            print(f"error: cannot read config: {exc}", file=sys.stderr)
            return 2
    try:
        config = parse_config(text, overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        result = run_scenario(config)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    for row in result.rows:
        status = "pass" if row.passed else "FAIL"
        print(f"[{status}] {row.theorem} n={row.n} {row.statistic} = {row.value:.4g} "
              f"(reference {row.reference:.4g})")
    if result.exit_code:
        print("one or more statistical checks failed", file=sys.stderr)
    return result.exit_code


if __name__ == "__main__":
    sys.exit(main())
