"""Monte Carlo and quadrature workbench for reduced critical branching
processes in random environment conditioned on non-favorable events."""

from .bpre import (ReducedSample, SampleBatch, ScenarioSpec, brute_force_tiny,
                   diagnostics_check, estimate_theta, reduced_count,
                   run_conditioned_trial, run_scenario_samples,
                   simulate_generation_chain)
from .envs import (EnvironmentModel, EnvOverflowError, EnvRealization,
                   draw_environment, extinction_backward, gf_eval,
                   survival_closed_form_lf, survival_lower_bound)
from .limits import (LimitLawTable, a2_limit, a_limit, cstar_and_h,
                     meander_min_after, q_min, tail_closed_form, w_limit)
from .stable import (InsufficientAcceptance, MeanderTable, PathEnsemble,
                     QuadratureError, StablePath, StableSpec, b_norming,
                     meander_density, min_and_endpoint_sampler, norming,
                     positivity_rho, sample_increment, sample_path,
                     stable_density)
from .stats import Ecdf, dkw_halfwidth, ks_distance, tail_index_fit, trend_monotone
from .walk import (BEventResult, LadderStats, RenewalTable, WalkPath,
                   asympv_ratio, build_renewal_table, conditioned_sample_positive,
                   estimate_renewal, event_b_probability, gather_ladder_heights,
                   ladder_decompose, min_stats, simulate_walk)

__version__ = "0.1.0"
