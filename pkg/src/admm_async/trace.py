"""Per-iteration run records and their CSV serialization.

A trace row holds everything the diagnostics need: the penalized-Lagrangian
value, optimality residuals, the objective at the center, and the squared
update/staleness magnitudes that appear in the descent and staleness bounds.
Floats are written with 17 significant digits so identical runs produce
bitwise-identical files; wall-clock times are deliberately kept out of the
CSV (they live in the run summary) for the same reason.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .model import ConsensusState, KktResidual

CSV_COLUMNS = (
    "k", "n_arrived", "arrivals", "l_rho", "kkt_worker", "kkt_master",
    "kkt_consensus", "objective", "dx0_sq", "stale_sq_sum", "dlam_sq_sum",
    "dx_sq_sum", "grad_dual_rel",
)


@dataclass
class IterationRecord:
    """State after update k (producing iterate k+1).

    The *_sq sums run over all workers; for drivers where non-arrived workers
    carry their variables over unchanged, those workers contribute exactly 0.
    `stale_sq_sum` is sum over arrivals of ||served x0 - current x0||^2,
    `grad_dual_rel` the largest relative gradient-plus-dual residual over
    workers that have arrived at least once.
    """

    k: int
    arrivals: tuple
    l_rho: float
    kkt: KktResidual
    objective: float
    dx0_sq: float
    stale_sq_sum: float
    dlam_sq_sum: float
    dx_sq_sum: float
    grad_dual_rel: float
    elapsed: float = 0.0


@dataclass
class Iterates:
    """Optional dense iterate storage for ergodic analysis (memory-heavy)."""

    x0: np.ndarray   # (K, n)
    xs: np.ndarray   # (K, N, n)
    duals: np.ndarray  # (K, N, n)


@dataclass
class RunTrace:
    """Everything a run produced: per-iteration records plus final state."""

    scheme: str
    rho: float
    gamma: float
    n_workers: int
    dim: int
    l_rho_initial: float
    kkt_initial: KktResidual
    records: list = field(default_factory=list)
    diverged: bool = False
    diverged_at: int | None = None
    final_state: ConsensusState | None = None
    iterates: Iterates | None = None
    f_ref: float | None = None
    meta: dict = field(default_factory=dict)
    wall_time: float = 0.0

    def __len__(self) -> int:
        return len(self.records)

    @property
    def completed_iterations(self) -> int:
        return len(self.records)

    def l_rho_series(self) -> np.ndarray:
        """Penalized-Lagrangian values at states 0..K (initial included)."""
        return np.array([self.l_rho_initial] + [r.l_rho for r in self.records])

    def arrival_sets(self) -> list:
        return [set(r.arrivals) for r in self.records]

    def max_arrivals(self) -> int:
        return max(len(r.arrivals) for r in self.records) if self.records else 0


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_trace_csv(trace: RunTrace, path) -> None:
    """Write the deterministic CSV form of a trace.

    Layout: a '# meta' comment line with sorted-key JSON run metadata, a
    header row, then one row per iteration.  Master-stationarity is written
    as nan when the regularizer has no subgradient-distance oracle.
    """
    meta = dict(trace.meta)
    meta.update({
        "scheme": trace.scheme, "rho": trace.rho, "gamma": trace.gamma,
        "n_workers": trace.n_workers, "dim": trace.dim,
        "l_rho_initial": trace.l_rho_initial,
        "kkt_initial": [trace.kkt_initial.worker, trace.kkt_initial.master,
                        trace.kkt_initial.consensus],
        "diverged": trace.diverged, "diverged_at": trace.diverged_at,
        "f_ref": trace.f_ref,
    })
    lines = ["# admm-async trace v1",
             "# meta " + json.dumps(meta, sort_keys=True),
             ",".join(CSV_COLUMNS)]
    for r in trace.records:
        master = math.nan if r.kkt.master is None else r.kkt.master
        lines.append(",".join([
            str(r.k), str(len(r.arrivals)),
            ";".join(str(i) for i in r.arrivals),
            _fmt(r.l_rho), _fmt(r.kkt.worker), _fmt(master),
            _fmt(r.kkt.consensus), _fmt(r.objective), _fmt(r.dx0_sq),
            _fmt(r.stale_sq_sum), _fmt(r.dlam_sq_sum), _fmt(r.dx_sq_sum),
            _fmt(r.grad_dual_rel),
        ]))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def read_trace_csv(path) -> RunTrace:
    """Reconstruct a RunTrace (records + metadata) from its CSV form."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    meta = None
    rows = []
    for line in lines:
        if line.startswith("# meta "):
            meta = json.loads(line[len("# meta "):])
        elif line.startswith("#") or not line.strip():
            continue
        elif line.startswith("k,"):
            if line != ",".join(CSV_COLUMNS):
                raise ValueError("unrecognized trace CSV header")
        else:
            rows.append(line)
    if meta is None:
        raise ValueError("trace CSV is missing its meta line")
    kw, km, kc = meta["kkt_initial"]
    trace = RunTrace(
        scheme=meta["scheme"], rho=meta["rho"], gamma=meta["gamma"],
        n_workers=meta["n_workers"], dim=meta["dim"],
        l_rho_initial=meta["l_rho_initial"],
        kkt_initial=KktResidual(worker=kw, master=km, consensus=kc),
        diverged=meta["diverged"], diverged_at=meta["diverged_at"],
        f_ref=meta.get("f_ref"), meta=meta)
    for row in rows:
        parts = row.split(",")
        arrivals = tuple(int(s) for s in parts[2].split(";")) if parts[2] else ()
        master = float(parts[5])
        trace.records.append(IterationRecord(
            k=int(parts[0]), arrivals=arrivals, l_rho=float(parts[3]),
            kkt=KktResidual(worker=float(parts[4]),
                            master=None if math.isnan(master) else master,
                            consensus=float(parts[6])),
            objective=float(parts[7]), dx0_sq=float(parts[8]),
            stale_sq_sum=float(parts[9]), dlam_sq_sum=float(parts[10]),
            dx_sq_sum=float(parts[11]), grad_dual_rel=float(parts[12])))
    return trace


def save_iterates(iterates: Iterates, path) -> None:
    np.savez_compressed(path, x0=iterates.x0, xs=iterates.xs, duals=iterates.duals)


def load_iterates(path) -> Iterates:
    with np.load(path) as data:
        return Iterates(x0=data["x0"], xs=data["xs"], duals=data["duals"])
