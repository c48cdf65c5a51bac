"""Consensus ADMM over a star master/worker topology.

Synchronous and asynchronous drivers (master-view simulation plus a real
socket runtime), problem generators, a parameter advisor implementing the
worst-case penalty/damping bounds, and diagnostics that verify the
convergence machinery numerically on recorded traces.
"""

from .advisor import (Recommendation, TheoryParams, check_initial_condition,
                      gamma_min, recommend, rho_max_alternative,
                      rho_min_convex, rho_min_nonconvex)
from .diagnostics import (DescentCheck, ErgodicGap, accuracy_series,
                          check_descent, check_ergodic_rate,
                          check_lower_bound, check_staleness_bound,
                          dual_identity_max, ergodic_gaps, kkt_trajectory)
from .engine import (AlgoParams, StaleView, ergodic_averages, run_ad_admm,
                     run_alternative, run_sync)
from .model import (ConsensusState, DimensionMismatch, KktResidual,
                    NumericError, ProblemInstance, Regularizer, SmoothBlock,
                    UnsupportedOperation, eval_augmented_lagrangian,
                    eval_objective, kkt_residuals, l1_regularizer,
                    zero_regularizer)
from .oracle import OracleSolution, proximal_gradient_reference
from .presets import ExperimentSpec, arrival_probs, preset_spec
from .problems import (gen_lasso, gen_sparse_pca, make_lasso_instance,
                       make_spca_instance, soft_threshold, solve_master_x0,
                       solve_worker, solve_worker_quadratic)
from .scheduler import (ArrivalModel, DelayState, Schedule, advance_delays,
                        draw_arrival_set, empirical_arrival_bound,
                        generate_schedule, validate_bounded_delay)
from .serialize import load_instance, save_instance, write_shards
from .trace import IterationRecord, RunTrace, read_trace_csv, write_trace_csv

__version__ = "0.1.0"
