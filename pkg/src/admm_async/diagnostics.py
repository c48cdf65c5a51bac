"""Numerical verification of the convergence machinery on recorded traces.

Four trace-level checks:

* per-iteration descent bound on the penalized Lagrangian (its decrease is
  bounded by damping/penalty terms minus asynchrony error terms),
* cumulative staleness bound (total served-center staleness is controlled
  by the center's total movement, scaled by S(tau-1)^2),
* lower-bound margin (the penalized Lagrangian never falls below the
  optimal value while the penalty dominates the curvature),
* the gradient-plus-dual identity (exact for exact subproblem solves).

plus the experiment accuracy metric and the ergodic O(1/k) rate proxy.
All inequality tolerances are relative: tol = 1e-8 * (1 + |initial value|),
since the bounds are exact in real arithmetic and slack comes only from
floating point and inner-solver tolerances.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine import ergodic_averages
from .model import KktResidual, ProblemInstance, UnsupportedOperation
from .trace import RunTrace

REL_TOL = 1e-8

STATUS_OK = "ok"
STATUS_HYPOTHESIS_VIOLATED = "hypothesis-violated"


def _tolerance(trace: RunTrace) -> float:
    return REL_TOL * (1.0 + abs(trace.l_rho_initial))


@dataclass
class DescentCheck:
    """One iteration's bound: lhs = L(k+1) - L(k), rhs = the four-term bound,
    slack = rhs - lhs (must be >= -tol while the penalty dominates)."""

    k: int
    lhs: float
    rhs: float

    @property
    def slack(self) -> float:
        return self.rhs - self.lhs


@dataclass
class DescentReport:
    status: str
    checks: list
    min_slack: float | None
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.status == STATUS_OK and self.min_slack is not None \
            and self.min_slack >= -self.tolerance


def check_descent(trace: RunTrace, L: float, rho: float | None = None,
                  gamma: float | None = None,
                  convex: bool = False) -> DescentReport:
    """Verify the per-iteration descent bound along a recorded run.

    For each k:
        L(k+1) - L(k) <= -(2*gamma + N*rho)/2 * ||dx0||^2
                         + (1/rho + 1/2) * sum ||dlam_i||^2
                         + (1 + rho^2)/2 * sum (served-center staleness)^2
                         + c_x * sum ||dx_i||^2
    with c_x = (1 - rho + L)/2 in general and (1 - rho)/2 when all blocks
    are convex.  The bound's hypothesis is rho >= L; below that the check
    reports hypothesis-violated instead of evaluating.
    """
    rho = trace.rho if rho is None else rho
    gamma = trace.gamma if gamma is None else gamma
    tol = _tolerance(trace)
    if rho < L:
        return DescentReport(status=STATUS_HYPOTHESIS_VIOLATED, checks=[],
                             min_slack=None, tolerance=tol)
    if not trace.records:
        return DescentReport(status=STATUS_OK, checks=[], min_slack=None,
                             tolerance=tol)
    N = trace.n_workers
    c_x = 0.5 * (1.0 - rho) if convex else 0.5 * ((1.0 - rho) + L)
    l_prev = trace.l_rho_initial
    checks = []
    for r in trace.records:
        lhs = r.l_rho - l_prev
        rhs = (-(2.0 * gamma + N * rho) / 2.0 * r.dx0_sq
               + (1.0 / rho + 0.5) * r.dlam_sq_sum
               + (1.0 + rho * rho) / 2.0 * r.stale_sq_sum
               + c_x * r.dx_sq_sum)
        checks.append(DescentCheck(k=r.k, lhs=lhs, rhs=rhs))
        l_prev = r.l_rho
    return DescentReport(status=STATUS_OK, checks=checks,
                         min_slack=min(c.slack for c in checks), tolerance=tol)


@dataclass
class StalenessReport:
    """Cumulative staleness lhs vs. its bound rhs = S(tau-1)^2 * total
    center movement (lhs <= rhs must hold on every schedule)."""

    lhs: float
    rhs: float
    S: int
    tau: int

    @property
    def passed(self) -> bool:
        return self.lhs <= self.rhs + 1e-12 * (1.0 + self.rhs)


def check_staleness_bound(trace: RunTrace, tau: int,
                          S: int | None = None) -> StalenessReport:
    """Verify sum_j sum_{i in A_j} ||x0^j - served_i||^2
    <= S (tau-1)^2 sum_{j<K-1} ||x0^{j+1} - x0^j||^2 on the recorded run."""
    if S is None:
        S = min(trace.n_workers, trace.max_arrivals() + 1)
    lhs = float(sum(r.stale_sq_sum for r in trace.records))
    rhs = float(S * (tau - 1) ** 2
                * sum(r.dx0_sq for r in trace.records[:-1]))
    return StalenessReport(lhs=lhs, rhs=rhs, S=S, tau=tau)


@dataclass
class LowerBoundReport:
    """Smallest margin of the penalized Lagrangian over a known lower bound
    on the optimal value; meaningful only while rho >= L."""

    status: str
    min_margin: float | None
    f_lower: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.status == STATUS_OK and self.min_margin is not None \
            and self.min_margin >= -self.tolerance


def check_lower_bound(trace: RunTrace, f_lower: float, L: float,
                      rho: float | None = None) -> LowerBoundReport:
    """min_k (L(k) - f_lower) over the run; skipped when rho < L."""
    rho = trace.rho if rho is None else rho
    tol = _tolerance(trace)
    if rho < L:
        return LowerBoundReport(status=STATUS_HYPOTHESIS_VIOLATED,
                                min_margin=None, f_lower=f_lower, tolerance=tol)
    margins = [r.l_rho - f_lower for r in trace.records]
    return LowerBoundReport(status=STATUS_OK,
                            min_margin=min(margins) if margins else None,
                            f_lower=f_lower, tolerance=tol)


def dual_identity_max(trace: RunTrace) -> float:
    """Largest relative gradient-plus-dual residual over the whole run.

    For drivers whose dual step ascends against the same center the worker
    solved with, this is zero up to solver precision for every worker after
    its first arrival.
    """
    if not trace.records:
        return 0.0
    return float(max(r.grad_dual_rel for r in trace.records))


def accuracy_series(trace: RunTrace, f_ref: float) -> np.ndarray:
    """|L(k) - f_ref| / |f_ref| for states k = 0..K (initial included)."""
    if f_ref == 0:
        raise ValueError("f_ref must be nonzero")
    return np.abs(trace.l_rho_series() - f_ref) / abs(f_ref)


@dataclass
class ErgodicGap:
    """Optimality gap of the running-average iterates at step k:
    |F(averages) - f_star| + sum_i ||x_i_bar - x0_bar||."""

    k: int
    gap: float


def ergodic_gaps(instance: ProblemInstance, trace: RunTrace,
                 f_star: float) -> list:
    """Gap sequence of the ergodic averages (requires stored iterates)."""
    x0_bar, xs_bar = ergodic_averages(trace)
    reg = instance.regularizer
    gaps = []
    for j in range(x0_bar.shape[0]):
        fsum = sum(b.value(xs_bar[j, i])
                   for i, b in enumerate(instance.blocks))
        obj = fsum + reg.value(x0_bar[j])
        cons = float(np.sum(np.linalg.norm(xs_bar[j] - x0_bar[j][None, :],
                                           axis=1)))
        gaps.append(ErgodicGap(k=j + 1, gap=abs(obj - f_star) + cons))
    return gaps


class InsufficientData(UnsupportedOperation):
    """Raised when too few samples exist to assess the ergodic rate."""


@dataclass
class ErgodicRateReport:
    fitted_C: float
    monotone_ok: bool
    reference_k: int
    reference_value: float


def check_ergodic_rate(gaps, reference_k: int = 100,
                       min_samples: int = 200) -> ErgodicRateReport:
    """Boundedness proxy for the O(1/k) ergodic rate.

    fitted_C = max_k k*gap(k); monotone_ok is true iff k*gap(k) stays within
    2x its value at k = reference_k for every later k.  The rate's constant
    is not observable directly, so boundedness of k*gap(k) is the testable
    surrogate.
    """
    if len(gaps) < min_samples:
        raise InsufficientData(
            f"need at least {min_samples} gap samples, got {len(gaps)}")
    kg = {g.k: g.k * g.gap for g in gaps}
    if reference_k not in kg:
        raise InsufficientData(f"no gap sample at k={reference_k}")
    ref = kg[reference_k]
    fitted = max(kg.values())
    tail_ok = all(v <= 2.0 * ref for k, v in kg.items() if k >= reference_k)
    return ErgodicRateReport(fitted_C=float(fitted), monotone_ok=bool(tail_ok),
                             reference_k=reference_k,
                             reference_value=float(ref))


def kkt_trajectory(trace: RunTrace) -> list:
    """The three optimality residual components per recorded iteration."""
    return [KktResidual(worker=r.kkt.worker, master=r.kkt.master,
                        consensus=r.kkt.consensus) for r in trace.records]
