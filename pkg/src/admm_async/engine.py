"""Algorithm drivers: synchronous consensus ADMM and two asynchronous
variants simulated from the master's point of view.

All three drivers share the same state layout and trace schema:

* ``run_sync``: one round per iteration — center update first, then all N
  worker subproblems against the fresh center, then all dual ascent steps.
* ``run_ad_admm``: per iteration only the arrived workers refresh their
  (x_i, lambda_i), each against the center snapshot it was last served;
  the center update then uses the freshest duals and a proximal damping
  term (gamma/2)||x0 - x0_prev||^2.  The up-to-date center is served only
  to the arrived workers.
* ``run_alternative``: the master owns every dual: arrived workers solve
  against their served (lambda_i, x0) snapshot, the center updates with the
  pre-update duals, then ALL duals ascend against the new center.  Arrived
  workers get fresh (x0, lambda_i) snapshots.

The asynchronous drivers consume a pre-generated Schedule, so any recorded
asynchrony (including one captured off a live socket run) can be replayed
exactly.  Runs are deterministic: identical inputs give identical traces.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .model import (ConsensusState, KktResidual, NumericError, ProblemInstance,
                    UnsupportedOperation, check_vector, kkt_residuals)
from .problems import solve_master_x0, solve_worker
from .scheduler import Schedule
from .trace import IterationRecord, Iterates, RunTrace

SCHEMES = ("sync", "ad-admm", "alternative")

# a run is flagged diverged when the penalized Lagrangian or the residuals
# grow 10x past their initial scale; the absolute floor keeps the rule
# meaningful for zero-initialized problems whose initial values are ~0
DIVERGENCE_FLOOR = 1e8


@dataclass(frozen=True)
class AlgoParams:
    """Scheme selector plus penalties and stopping rule.

    `gamma` is the proximal damping on the center update (asynchronous
    scheme only; the synchronous driver has no such term and the
    alternative scheme requires gamma = 0).  The primary stopping rule is
    the iteration cap; `kkt_tol` optionally stops early once the largest
    optimality residual falls below it.
    """

    scheme: str
    rho: float
    gamma: float = 0.0
    max_iters: int = 1000
    kkt_tol: float | None = None

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.rho <= 0:
            raise ValueError("rho must be > 0")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0 (clamp advisor output)")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")


@dataclass
class StaleView:
    """Per-worker snapshots of what the master last served.

    `x0[i]` is the center produced at the iteration of worker i's previous
    arrival (the initial broadcast before iteration 0 counts); `duals[i]`
    is the dual snapshot served alongside it (alternative scheme only).
    """

    x0: np.ndarray          # (N, n)
    duals: np.ndarray | None = None


def default_threads() -> int:
    """Worker-subproblem parallelism cap, from ADMM_ASYNC_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("ADMM_ASYNC_THREADS", "1")))
    except ValueError:
        return 1


class _RunState:
    """Mutable loop state shared by the three drivers."""

    def __init__(self, instance: ProblemInstance, rho: float,
                 x0_init: np.ndarray | None, record_iterates: bool):
        n, N = instance.dim, instance.n_blocks
        self.instance = instance
        self.rho = rho
        x0 = np.zeros(n) if x0_init is None else check_vector(x0_init, n, "x0_init")
        self.x0 = x0.copy()
        self.xs = np.tile(x0, (N, 1))
        self.lams = np.zeros((N, n))
        self.fvals = np.array([b.value(self.x0) for b in instance.blocks])
        self.grads = np.stack([b.grad(self.x0) for b in instance.blocks])
        self.arrived_once = np.zeros(N, dtype=bool)
        self.record_iterates = record_iterates
        self.hist_x0, self.hist_xs, self.hist_lams = [], [], []

    def l_rho(self) -> float:
        diff = self.xs - self.x0[None, :]
        return float(self.fvals.sum()
                     + self.instance.regularizer.value(self.x0)
                     + np.sum(self.lams * diff)
                     + 0.5 * self.rho * np.sum(diff * diff))

    def kkt(self) -> KktResidual:
        resid = self.grads + self.lams
        worker = float(np.max(np.linalg.norm(resid, axis=1)))
        consensus = float(np.max(np.linalg.norm(self.xs - self.x0[None, :], axis=1)))
        dist = self.instance.regularizer.subgrad_dist
        master = None if dist is None else float(dist(self.x0, self.lams.sum(axis=0)))
        return KktResidual(worker=worker, master=master, consensus=consensus)

    def grad_dual_rel(self) -> float:
        if not self.arrived_once.any():
            return 0.0
        idx = np.flatnonzero(self.arrived_once)
        resid = np.linalg.norm(self.grads[idx] + self.lams[idx], axis=1)
        scale = 1.0 + np.linalg.norm(self.lams[idx], axis=1)
        return float(np.max(resid / scale))

    def objective_at_x0(self) -> float:
        total = sum(b.value(self.x0) for b in self.instance.blocks)
        return float(total + self.instance.regularizer.value(self.x0))

    def refresh_block(self, i: int) -> None:
        block = self.instance.blocks[i]
        self.fvals[i] = block.value(self.xs[i])
        self.grads[i] = block.grad(self.xs[i])

    def snapshot(self) -> None:
        if self.record_iterates:
            self.hist_x0.append(self.x0.copy())
            self.hist_xs.append(self.xs.copy())
            self.hist_lams.append(self.lams.copy())

    def final(self, k: int) -> ConsensusState:
        return ConsensusState(x0=self.x0.copy(), xs=self.xs.copy(),
                              duals=self.lams.copy(), k=k)

    def iterates(self) -> Iterates | None:
        if not self.record_iterates:
            return None
        return Iterates(x0=np.array(self.hist_x0), xs=np.array(self.hist_xs),
                        duals=np.array(self.hist_lams))


def _is_diverged(l_rho: float, kkt_max: float, l_rho0: float, kkt0: float) -> bool:
    if not (np.isfinite(l_rho) and np.isfinite(kkt_max)):
        return True
    if abs(l_rho) > max(DIVERGENCE_FLOOR, 10.0 * (1.0 + abs(l_rho0))):
        return True
    return kkt_max > max(DIVERGENCE_FLOOR, 10.0 * (1.0 + kkt0))


def _solve_arrivals(instance, arrivals, lams_by_worker, refs_by_worker, rho,
                    pool: ThreadPoolExecutor | None):
    """Solve the arrived workers' subproblems; results in arrival order.

    The merge order is fixed by the (sorted) arrival tuple, so threaded and
    serial execution produce identical traces.
    """
    if pool is None:
        return [solve_worker(instance.blocks[i], lams_by_worker[j],
                             refs_by_worker[j], rho)
                for j, i in enumerate(arrivals)]
    futures = [pool.submit(solve_worker, instance.blocks[i],
                           lams_by_worker[j], refs_by_worker[j], rho)
               for j, i in enumerate(arrivals)]
    return [f.result() for f in futures]


def _run_loop(instance: ProblemInstance, params: AlgoParams, arrival_plan,
              step_fn, x0_init, record_iterates, threads, meta) -> RunTrace:
    """Shared driver skeleton: iterate, record, detect divergence, stop."""
    state = _RunState(instance, params.rho, x0_init, record_iterates)
    l_rho0 = state.l_rho()
    kkt0 = state.kkt()
    trace = RunTrace(scheme=params.scheme, rho=params.rho, gamma=params.gamma,
                     n_workers=instance.n_blocks, dim=instance.dim,
                     l_rho_initial=l_rho0, kkt_initial=kkt0, meta=dict(meta))
    kkt0_max = kkt0.max_component()
    threads = default_threads() if threads is None else max(1, int(threads))
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    t_start = time.perf_counter()
    try:
        for k in range(params.max_iters):
            arrivals = arrival_plan(k)
            try:
                rec_fields = step_fn(state, arrivals, pool)
            except NumericError:
                trace.diverged = True
                trace.diverged_at = k
                break
            with np.errstate(all="ignore"):
                l_rho = state.l_rho()
                kkt = state.kkt()
                objective = state.objective_at_x0() if np.all(np.isfinite(state.x0)) \
                    else float("nan")
            record = IterationRecord(
                k=k, arrivals=arrivals, l_rho=l_rho, kkt=kkt,
                objective=objective, grad_dual_rel=state.grad_dual_rel(),
                elapsed=time.perf_counter() - t_start, **rec_fields)
            trace.records.append(record)
            state.snapshot()
            if _is_diverged(l_rho, kkt.max_component(), l_rho0, kkt0_max):
                trace.diverged = True
                trace.diverged_at = k
                break
            if params.kkt_tol is not None and kkt.max_component() <= params.kkt_tol:
                break
    finally:
        if pool is not None:
            pool.shutdown(wait=False)
    trace.final_state = state.final(len(trace.records))
    trace.iterates = state.iterates()
    trace.wall_time = time.perf_counter() - t_start
    return trace


# ---------------------------------------------------------------------------
# synchronous driver
# ---------------------------------------------------------------------------

def run_sync(instance: ProblemInstance, params: AlgoParams,
             x0_init=None, record_iterates: bool = False,
             threads: int | None = None, order_swapped: bool = False) -> RunTrace:
    """Synchronous consensus ADMM.

    Default order: center update from the current (x_i, lambda_i); all N
    worker subproblems against the fresh center; all dual ascent steps.
    With ``order_swapped=True`` the workers move first against the previous
    center (with duals ascending against that same stale center) and the
    center update comes last using the refreshed duals — the reference loop
    the asynchronous driver reduces to when every worker arrives every
    iteration.  The synchronous center update carries no proximal damping
    except in the swapped variant, where ``params.gamma`` is honored so the
    reduction is exact.
    """
    if params.scheme != "sync":
        raise ValueError("params.scheme must be 'sync'")
    N = instance.n_blocks
    reg = instance.regularizer
    all_workers = tuple(range(N))

    def step(state: _RunState, arrivals, pool):
        rho = params.rho
        x0_prev = state.x0
        if order_swapped:
            refs = [x0_prev] * N
            xs_new = _solve_arrivals(instance, all_workers, state.lams, refs,
                                     rho, pool)
            xs_new = np.stack(xs_new)
            lams_new = state.lams + rho * (xs_new - x0_prev[None, :])
            dx_sq = float(np.sum((xs_new - state.xs) ** 2))
            dlam_sq = float(np.sum((lams_new - state.lams) ** 2))
            state.xs, state.lams = xs_new, lams_new
            for i in all_workers:
                state.refresh_block(i)
            x0_new = solve_master_x0(reg, state.lams.sum(axis=0),
                                     state.xs.sum(axis=0), N, rho,
                                     params.gamma, x0_prev)
        else:
            x0_new = solve_master_x0(reg, state.lams.sum(axis=0),
                                     state.xs.sum(axis=0), N, rho, 0.0, x0_prev)
            refs = [x0_new] * N
            xs_new = np.stack(_solve_arrivals(instance, all_workers, state.lams,
                                              refs, rho, pool))
            lams_new = state.lams + rho * (xs_new - x0_new[None, :])
            dx_sq = float(np.sum((xs_new - state.xs) ** 2))
            dlam_sq = float(np.sum((lams_new - state.lams) ** 2))
            state.xs, state.lams = xs_new, lams_new
            for i in all_workers:
                state.refresh_block(i)
        state.arrived_once[:] = True
        dx0_sq = float(np.sum((x0_new - x0_prev) ** 2))
        state.x0 = x0_new
        return {"dx0_sq": dx0_sq, "stale_sq_sum": 0.0,
                "dlam_sq_sum": dlam_sq, "dx_sq_sum": dx_sq}

    meta = {"order_swapped": order_swapped}
    return _run_loop(instance, params, lambda k: all_workers, step, x0_init,
                     record_iterates, threads, meta)


# ---------------------------------------------------------------------------
# asynchronous driver (master-view simulation)
# ---------------------------------------------------------------------------

def run_ad_admm(instance: ProblemInstance, params: AlgoParams,
                schedule: Schedule, x0_init=None,
                record_iterates: bool = False,
                threads: int | None = None) -> RunTrace:
    """Asynchronous driver: arrived workers refresh against served centers.

    Per iteration k: each arrived worker i solves its subproblem against
    (lambda_i, served_x0_i) and ascends its dual against the same served
    center; non-arrived workers carry everything over unchanged.  The center
    then minimizes with the refreshed duals plus proximal damping gamma, and
    the new center is served only to the arrived workers.
    """
    if params.scheme != "ad-admm":
        raise ValueError("params.scheme must be 'ad-admm'")
    if len(schedule) < params.max_iters:
        raise ValueError(f"schedule has {len(schedule)} iterations, "
                         f"need {params.max_iters}")
    if schedule.n_workers != instance.n_blocks:
        raise ValueError("schedule/instance worker count mismatch")
    N = instance.n_blocks
    reg = instance.regularizer
    view = {}

    def step(state: _RunState, arrivals, pool):
        rho = params.rho
        if "served" not in view:
            view["served"] = StaleView(x0=np.tile(state.x0, (N, 1)))
        served = view["served"]
        x0_prev = state.x0
        stale_sq = sum(float(np.sum((served.x0[i] - x0_prev) ** 2))
                       for i in arrivals)
        lams_in = [state.lams[i] for i in arrivals]
        refs = [served.x0[i] for i in arrivals]
        xs_new = _solve_arrivals(instance, arrivals, lams_in, refs, rho, pool)
        dlam_sq = 0.0
        dx_sq = 0.0
        for j, i in enumerate(arrivals):
            x_new = xs_new[j]
            lam_new = state.lams[i] + rho * (x_new - served.x0[i])
            dx_sq += float(np.sum((x_new - state.xs[i]) ** 2))
            dlam_sq += float(np.sum((lam_new - state.lams[i]) ** 2))
            state.xs[i] = x_new
            state.lams[i] = lam_new
            state.refresh_block(i)
            state.arrived_once[i] = True
        x0_new = solve_master_x0(reg, state.lams.sum(axis=0),
                                 state.xs.sum(axis=0), N, rho,
                                 params.gamma, x0_prev)
        for i in arrivals:
            served.x0[i] = x0_new
        dx0_sq = float(np.sum((x0_new - x0_prev) ** 2))
        state.x0 = x0_new
        return {"dx0_sq": dx0_sq, "stale_sq_sum": stale_sq,
                "dlam_sq_sum": dlam_sq, "dx_sq_sum": dx_sq}

    meta = {"tau": schedule.tau, "min_arrivals": schedule.min_arrivals,
            "schedule_seed": schedule.seed}
    plan = lambda k: schedule.records[k].arrivals
    return _run_loop(instance, params, plan, step, x0_init, record_iterates,
                     threads, meta)


def run_alternative(instance: ProblemInstance, params: AlgoParams,
                    schedule: Schedule, x0_init=None,
                    record_iterates: bool = False,
                    threads: int | None = None) -> RunTrace:
    """Master-owned-duals variant.

    Arrived workers solve against the (lambda_i, x0) snapshot served at
    their previous arrival; the center update uses the pre-update duals;
    then every dual ascends against the new center.  Snapshots refresh for
    arrived workers only.  Requires gamma = 0 (the regime in which this
    scheme carries a guarantee).
    """
    if params.scheme != "alternative":
        raise ValueError("params.scheme must be 'alternative'")
    if params.gamma != 0.0:
        raise ValueError("the alternative scheme requires gamma = 0")
    if len(schedule) < params.max_iters:
        raise ValueError(f"schedule has {len(schedule)} iterations, "
                         f"need {params.max_iters}")
    if schedule.n_workers != instance.n_blocks:
        raise ValueError("schedule/instance worker count mismatch")
    N = instance.n_blocks
    reg = instance.regularizer
    view = {}

    def step(state: _RunState, arrivals, pool):
        rho = params.rho
        if "served" not in view:
            view["served"] = StaleView(x0=np.tile(state.x0, (N, 1)),
                                       duals=state.lams.copy())
        served = view["served"]
        x0_prev = state.x0
        stale_sq = sum(float(np.sum((served.x0[i] - x0_prev) ** 2))
                       for i in arrivals)
        lams_in = [served.duals[i] for i in arrivals]
        refs = [served.x0[i] for i in arrivals]
        xs_new = _solve_arrivals(instance, arrivals, lams_in, refs, rho, pool)
        dx_sq = 0.0
        for j, i in enumerate(arrivals):
            dx_sq += float(np.sum((xs_new[j] - state.xs[i]) ** 2))
            state.xs[i] = xs_new[j]
            state.refresh_block(i)
            state.arrived_once[i] = True
        x0_new = solve_master_x0(reg, state.lams.sum(axis=0),
                                 state.xs.sum(axis=0), N, rho, 0.0, x0_prev)
        lams_new = state.lams + rho * (state.xs - x0_new[None, :])
        dlam_sq = float(np.sum((lams_new - state.lams) ** 2))
        state.lams = lams_new
        for i in arrivals:
            served.x0[i] = x0_new
            served.duals[i] = lams_new[i]
        dx0_sq = float(np.sum((x0_new - x0_prev) ** 2))
        state.x0 = x0_new
        return {"dx0_sq": dx0_sq, "stale_sq_sum": stale_sq,
                "dlam_sq_sum": dlam_sq, "dx_sq_sum": dx_sq}

    meta = {"tau": schedule.tau, "min_arrivals": schedule.min_arrivals,
            "schedule_seed": schedule.seed}
    plan = lambda k: schedule.records[k].arrivals
    return _run_loop(instance, params, plan, step, x0_init, record_iterates,
                     threads, meta)


def ergodic_averages(trace: RunTrace) -> tuple[np.ndarray, np.ndarray]:
    """Running means of the primal iterates: (x0_bar, xs_bar).

    x0_bar[k-1] = (1/k) * sum of the first k post-update centers, and
    likewise per worker.  Requires the run to have stored its iterates.
    """
    if trace.iterates is None:
        raise UnsupportedOperation(
            "run did not store iterates; rerun with record_iterates=True")
    counts = np.arange(1, trace.iterates.x0.shape[0] + 1, dtype=np.float64)
    x0_bar = np.cumsum(trace.iterates.x0, axis=0) / counts[:, None]
    xs_bar = np.cumsum(trace.iterates.xs, axis=0) / counts[:, None, None]
    return x0_bar, xs_bar
