"""Deterministic simulation of the partially asynchronous arrival process.

Each master iteration k consumes updates from an arrival set A_k.  Workers
arrive independently with per-worker Bernoulli probabilities; staleness is
capped by a maximum tolerable delay tau (a worker unseen for tau - 1
iterations is force-included, modeling the master waiting for it), and the
master proceeds only once at least `min_arrivals` workers have arrived.

Schedules are pre-generated, seeded, and replayable: the bounded-delay
property can never be violated by construction, and identical seeds yield
bitwise-identical schedules.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ArrivalModel:
    """Per-worker arrival probabilities plus the delay and arrival gates."""

    probs: tuple
    tau: int
    min_arrivals: int = 1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "probs", tuple(float(p) for p in self.probs))
        N = len(self.probs)
        if N < 1:
            raise ValueError("need at least one worker")
        if any(not 0.0 <= p <= 1.0 for p in self.probs):
            raise ValueError("probabilities must lie in [0, 1]")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")
        if not 1 <= self.min_arrivals <= N:
            raise ValueError("min_arrivals must lie in [1, N]")

    @property
    def n_workers(self) -> int:
        return len(self.probs)


@dataclass
class DelayState:
    """d_i = master iterations since worker i last arrived."""

    d: list

    def __post_init__(self):
        self.d = [int(v) for v in self.d]
        if any(v < 0 for v in self.d):
            raise ValueError("delay counters must be >= 0")

    @classmethod
    def initial(cls, N: int) -> "DelayState":
        # every worker counts as arrived before iteration 0 (initial broadcast)
        return cls(d=[0] * N)


def draw_arrival_set(model: ArrivalModel, delays: DelayState,
                     rng: np.random.Generator) -> set:
    """Draw one arrival set.

    (i) every worker whose delay has reached tau - 1 is force-included (the
    master would block on it); (ii) the rest arrive independently with their
    Bernoulli probabilities; (iii) while fewer than `min_arrivals` arrived,
    additional independent rounds of draws are taken over the still-unarrived
    workers, so faster workers remain more likely to fill the gap.  If no
    unarrived worker has positive probability the stalest ones are admitted
    directly, which keeps the all-zero-probability model well defined.
    """
    N = model.n_workers
    arrived = {i for i in range(N) if delays.d[i] >= model.tau - 1}
    pending = [i for i in range(N) if i not in arrived]
    u = rng.random(len(pending))
    arrived.update(i for j, i in enumerate(pending) if u[j] < model.probs[i])
    while len(arrived) < model.min_arrivals:
        pending = [i for i in range(N) if i not in arrived]
        if max(model.probs[i] for i in pending) <= 0.0:
            pending.sort(key=lambda i: (-delays.d[i], i))
            arrived.update(pending[: model.min_arrivals - len(arrived)])
            break
        u = rng.random(len(pending))
        arrived.update(i for j, i in enumerate(pending) if u[j] < model.probs[i])
    return arrived


def advance_delays(delays: DelayState, arrived: set) -> DelayState:
    """Reset counters for arrived workers, increment the rest."""
    N = len(delays.d)
    if not arrived:
        raise ValueError("arrival set may not be empty (min_arrivals >= 1)")
    if not all(0 <= i < N for i in arrived):
        raise ValueError("arrival set contains unknown worker ids")
    return DelayState(d=[0 if i in arrived else delays.d[i] + 1 for i in range(N)])


@dataclass(frozen=True)
class ScheduleRecord:
    """One iteration: arrivals, post-iteration delays, and for each arrival
    the iteration of that worker's previous arrival (-1 before the first)."""

    k: int
    arrivals: tuple
    d_after: tuple
    prev_arrival: tuple  # aligned with `arrivals`


@dataclass
class Schedule:
    """A replayable arrival schedule honoring the bounded-delay model."""

    tau: int
    min_arrivals: int
    n_workers: int
    seed: int | None
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def arrival_sets(self) -> list:
        return [set(r.arrivals) for r in self.records]

    def max_arrivals(self) -> int:
        return max(len(r.arrivals) for r in self.records)

    def to_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = {"tau": self.tau, "min_arrivals": self.min_arrivals,
                      "n_workers": self.n_workers, "seed": self.seed}
            fh.write(json.dumps(header, sort_keys=True) + "\n")
            for r in self.records:
                fh.write(json.dumps(
                    {"k": r.k, "arrivals": list(r.arrivals),
                     "d": list(r.d_after), "prev": list(r.prev_arrival)},
                    sort_keys=True) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "Schedule":
        with open(path, "r", encoding="utf-8") as fh:
            lines = [json.loads(line) for line in fh if line.strip()]
        if not lines:
            raise ValueError("empty schedule file")
        head, rows = lines[0], lines[1:]
        records = [ScheduleRecord(k=row["k"], arrivals=tuple(row["arrivals"]),
                                  d_after=tuple(row["d"]),
                                  prev_arrival=tuple(row["prev"]))
                   for row in rows]
        return cls(tau=head["tau"], min_arrivals=head["min_arrivals"],
                   n_workers=head["n_workers"], seed=head.get("seed"),
                   records=records)

    @classmethod
    def from_arrival_sets(cls, arrival_sets, tau: int, min_arrivals: int,
                          n_workers: int, seed: int | None = None) -> "Schedule":
        """Build a schedule from raw arrival sets (e.g. recorded off a live
        run), reconstructing delay counters and previous-arrival indices."""
        records = []
        delays = DelayState.initial(n_workers)
        last = [-1] * n_workers
        for k, arr in enumerate(arrival_sets):
            arrivals = tuple(sorted(arr))
            prev = tuple(last[i] for i in arrivals)
            delays = advance_delays(delays, set(arrivals))
            for i in arrivals:
                last[i] = k
            records.append(ScheduleRecord(k=k, arrivals=arrivals,
                                          d_after=tuple(delays.d),
                                          prev_arrival=prev))
        return cls(tau=tau, min_arrivals=min_arrivals, n_workers=n_workers,
                   seed=seed, records=records)


def generate_schedule(model: ArrivalModel, n_iters: int,
                      initial_delays: DelayState | None = None) -> Schedule:
    """Pre-generate `n_iters` arrival sets under the given model."""
    rng = np.random.default_rng(model.seed)
    delays = initial_delays if initial_delays is not None \
        else DelayState.initial(model.n_workers)
    arrival_sets = []
    for _ in range(n_iters):
        arr = draw_arrival_set(model, delays, rng)
        arrival_sets.append(arr)
        delays = advance_delays(delays, arr)
    return Schedule.from_arrival_sets(arrival_sets, tau=model.tau,
                                      min_arrivals=model.min_arrivals,
                                      n_workers=model.n_workers,
                                      seed=model.seed)


def validate_bounded_delay(schedule: Schedule) -> None:
    """Exhaustively verify the staleness cap and the arrival-count gate.

    For every worker i and iteration k there must be an arrival of i in the
    window [k - tau + 1, k], with the pre-start broadcast counting as an
    arrival of everyone at iteration -1.  Raises AssertionError on violation.
    """
    tau, N = schedule.tau, schedule.n_workers
    last = [-1] * N
    for r in schedule.records:
        if len(r.arrivals) < schedule.min_arrivals:
            raise AssertionError(f"|A_{r.k}| < min_arrivals at k={r.k}")
        for i in r.arrivals:
            last[i] = r.k
        for i in range(N):
            if last[i] < max(r.k - tau + 1, -1):
                raise AssertionError(
                    f"worker {i} stale beyond tau={tau} at iteration {r.k}")


def empirical_arrival_bound(schedule: Schedule) -> int:
    """S = min(N, max_k |A_k| + 1): the arrival-set size bound fed to the
    advisor (the strict bound is unattainable when every worker arrives)."""
    return min(schedule.n_workers, schedule.max_arrivals() + 1)
