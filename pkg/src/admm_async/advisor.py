"""Closed-form penalty/damping bounds and feasibility checks.

Evaluates the worst-case parameter conditions under which the asynchronous
drivers carry convergence guarantees: lower bounds on the penalty rho (one
for general smooth blocks, a weaker one when all blocks are convex), the
delay-dependent lower bound on the center damping gamma, and the upper bound
on rho required by the master-owned-duals scheme under strong convexity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .model import ConsensusState, ProblemInstance, eval_augmented_lagrangian

# strict inequalities get a 1% safety margin when recommending values
MARGIN = 1.01


@dataclass(frozen=True)
class TheoryParams:
    """Constants the parameter bounds consume.

    L: largest gradient-Lipschitz constant over blocks; sigma2: smallest
    strong-convexity modulus; S: arrival-set size bound; F_star_lower: a
    lower bound on the optimal value when one is known.
    """

    L: float
    sigma2: float
    tau: int
    N: int
    S: int
    F_star_lower: float | None = None

    def __post_init__(self):
        if self.L < 0 or self.sigma2 < 0:
            raise ValueError("L and sigma2 must be >= 0")
        if not 1 <= self.S <= self.N:
            raise ValueError("S must lie in [1, N]")
        if self.tau < 1:
            raise ValueError("tau must be >= 1")


def rho_min_nonconvex(L: float) -> float:
    """Penalty threshold for general (possibly non-convex) smooth blocks:
    ((1 + L + L^2) + sqrt((1 + L + L^2)^2 + 8 L^2)) / 2.

    Any rho strictly above it satisfies the asynchronous driver's penalty
    condition; the value always exceeds L, so worker subproblems are
    strongly convex.
    """
    if L < 0:
        raise ValueError("L must be >= 0")
    a = 1.0 + L + L * L
    return 0.5 * (a + math.sqrt(a * a + 8.0 * L * L))


def rho_min_convex(L: float) -> float:
    """Penalty threshold when all blocks are convex:
    ((1 + L^2) + sqrt((1 + L^2)^2 + 8 L^2)) / 2.
    """
    if L < 0:
        raise ValueError("L must be >= 0")
    a = 1.0 + L * L
    return 0.5 * (a + math.sqrt(a * a + 8.0 * L * L))


def gamma_min(S: int, rho: float, tau: int, N: int) -> float:
    """Center-damping threshold (S(1 + rho^2)(tau - 1)^2 - N*rho) / 2.

    Grows like tau^2; negative for tau = 1 (the damping term can then be
    dropped entirely) — callers clamp negative values to 0.
    """
    if S < 1 or rho <= 0 or tau < 1:
        raise ValueError("need S >= 1, rho > 0, tau >= 1")
    return 0.5 * (S * (1.0 + rho * rho) * (tau - 1) ** 2 - N * rho)


def rho_max_alternative(sigma2: float, tau: int) -> float:
    """Largest admissible penalty for the master-owned-duals scheme:
    sigma2 / ((5 tau - 3) * max(2 tau, 3 (tau - 1))).

    Requires strong convexity; sigma2 = 0 means the scheme has no
    admissible penalty.
    """
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if sigma2 <= 0:
        raise ValueError(
            "the alternative scheme requires strongly convex blocks (sigma2 > 0)")
    return sigma2 / ((5 * tau - 3) * max(2 * tau, 3 * (tau - 1)))


def check_initial_condition(instance: ProblemInstance, state0: ConsensusState,
                            rho: float, f_star_lower: float) -> bool:
    """True iff the penalized Lagrangian at the start is finite and at least
    the (estimated) optimal value — the admissible-start condition."""
    l0 = eval_augmented_lagrangian(instance, state0, rho)
    return bool(math.isfinite(l0) and l0 >= f_star_lower)


@dataclass(frozen=True)
class Recommendation:
    """Advisor output: thresholds plus margined recommended values."""

    L: float
    sigma2: float
    tau: int
    N: int
    S: int
    convex: bool
    rho_threshold: float
    rho: float
    gamma_threshold: float
    gamma: float
    rho_max_alt: float | None

    def as_dict(self) -> dict:
        return {
            "L": self.L, "sigma2": self.sigma2, "tau": self.tau, "N": self.N,
            "S": self.S, "convex": self.convex,
            "rho_threshold": self.rho_threshold, "rho": self.rho,
            "gamma_threshold": self.gamma_threshold, "gamma": self.gamma,
            "rho_max_alternative": self.rho_max_alt,
        }


def recommend(instance: ProblemInstance, tau: int, S: int | None = None) -> Recommendation:
    """Margined (rho, gamma) recommendation for the asynchronous driver.

    Uses the convex penalty threshold when every block is convex.  S
    defaults to N when no empirical arrival bound is supplied.  gamma is
    clamped at 0 (a negative threshold means no damping is needed).
    """
    L = instance.lipschitz_max
    sigma2 = instance.strong_convexity_min
    N = instance.n_blocks
    S = N if S is None else min(max(1, S), N)
    convex = instance.is_convex
    rho_thr = rho_min_convex(L) if convex else rho_min_nonconvex(L)
    rho = MARGIN * rho_thr
    g_thr = gamma_min(S, rho, tau, N)
    gamma = MARGIN * g_thr if g_thr > 0 else 0.0
    rho_max = rho_max_alternative(sigma2, tau) if sigma2 > 0 else None
    return Recommendation(L=L, sigma2=sigma2, tau=tau, N=N, S=S, convex=convex,
                          rho_threshold=rho_thr, rho=rho,
                          gamma_threshold=g_thr, gamma=gamma,
                          rho_max_alt=rho_max)
