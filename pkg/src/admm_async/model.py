"""Core domain types for consensus optimization.

A problem is a sum of N smooth blocks plus one (convex, possibly non-smooth)
regularizer over R^n.  Every algorithm in this package manipulates the same
consensus state: a center vector x0, one local copy x_i per block, and one
dual vector lambda_i per coupling constraint x_i = x0.

All numeric data is 64-bit floating point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np


class DimensionMismatch(ValueError):
    """Raised when an argument's dimension disagrees with the problem's."""


class NumericError(RuntimeError):
    """Raised when a linear system or inner solve fails numerically."""


class UnsupportedOperation(RuntimeError):
    """Raised when a requested computation needs data that was not recorded."""


def check_vector(x, dim: int | None = None, name: str = "vector") -> np.ndarray:
    """Validate and coerce a 1-D finite float64 array.

    Raises DimensionMismatch on wrong shape, ValueError on non-finite entries.
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise DimensionMismatch(f"{name} must be a non-empty 1-D array, got shape {arr.shape}")
    if dim is not None and arr.shape[0] != dim:
        raise DimensionMismatch(f"{name} has dimension {arr.shape[0]}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite entries")
    return arr


CURVATURE_KINDS = ("quadratic-psd", "quadratic-indefinite", "general")


@dataclass
class SmoothBlock:
    """One smooth cost block f_i with value/gradient oracles.

    For quadratic blocks, f(x) = x'Qx - 2c'x + r with Q symmetric; Q, c, r
    are kept so subproblems can be solved in closed form.  `lipschitz` bounds
    the gradient's Lipschitz constant; `strong_convexity` is the convexity
    modulus (0 when absent).
    """

    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    lipschitz: float
    strong_convexity: float = 0.0
    curvature: str = "general"
    quad_q: np.ndarray | None = None
    quad_c: np.ndarray | None = None
    quad_r: float = 0.0
    _factor_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.curvature not in CURVATURE_KINDS:
            raise ValueError(f"unknown curvature kind {self.curvature!r}")
        if self.lipschitz < 0 or self.strong_convexity < 0:
            raise ValueError("lipschitz and strong_convexity must be >= 0")

    @property
    def is_quadratic(self) -> bool:
        return self.quad_q is not None

    @classmethod
    def quadratic(cls, Q: np.ndarray, c: np.ndarray, r: float = 0.0,
                  curvature: str = "quadratic-psd",
                  lipschitz: float | None = None,
                  strong_convexity: float = 0.0,
                  value: Callable | None = None,
                  grad: Callable | None = None) -> "SmoothBlock":
        """Build a quadratic block f(x) = x'Qx - 2c'x + r.

        `value`/`grad` may be supplied when a cheaper equivalent form exists
        (e.g. factored least-squares); otherwise dense Q is used.
        """
        Q = np.asarray(Q, dtype=np.float64)
        c = np.asarray(c, dtype=np.float64)
        if Q.ndim != 2 or Q.shape[0] != Q.shape[1] or Q.shape[0] != c.shape[0]:
            raise DimensionMismatch("Q must be square and conformal with c")
        if value is None:
            value = lambda x: float(x @ (Q @ x) - 2.0 * (c @ x) + r)
        if grad is None:
            grad = lambda x: 2.0 * (Q @ x - c)
        if lipschitz is None:
            lipschitz = 2.0 * float(np.linalg.norm(Q, 2))
        return cls(value=value, grad=grad, lipschitz=lipschitz,
                   strong_convexity=strong_convexity, curvature=curvature,
                   quad_q=Q, quad_c=c, quad_r=float(r))


@dataclass
class Regularizer:
    """Convex regularizer h with a value oracle and a proximal oracle.

    prox(v, w) minimizes h(u) + (1/(2w)) * ||u - v||^2 over u, for w > 0.
    `subgrad_dist(x0, s)`, when available, returns the distance from s to the
    subdifferential of h at x0; regularizers without it report the
    center-stationarity residual as unavailable.
    """

    value: Callable[[np.ndarray], float]
    prox: Callable[[np.ndarray, float], np.ndarray]
    subgrad_dist: Callable[[np.ndarray, np.ndarray], float] | None = None
    kind: str = "custom"
    theta: float = 0.0


def zero_regularizer() -> Regularizer:
    """h = 0; prox is the identity and every s has distance ||s|| to {0}."""
    return Regularizer(
        value=lambda x: 0.0,
        prox=lambda v, w: np.array(v, dtype=np.float64, copy=True),
        subgrad_dist=lambda x0, s: float(np.linalg.norm(s)),
        kind="zero",
        theta=0.0,
    )


def l1_regularizer(theta: float) -> Regularizer:
    """h = theta * ||.||_1 with closed-form prox (componentwise shrinkage)."""
    if theta < 0:
        raise ValueError("theta must be >= 0")

    def value(x):
        return float(theta * np.sum(np.abs(x)))

    def prox(v, w):
        kappa = theta * w
        return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)

    def subgrad_dist(x0, s):
        # componentwise: dist of s_j to [-theta, theta] where (x0)_j = 0,
        # |s_j - theta*sign((x0)_j)| elsewhere
        at_zero = x0 == 0.0
        d = np.where(at_zero,
                     np.maximum(np.abs(s) - theta, 0.0),
                     np.abs(s - theta * np.sign(x0)))
        return float(np.linalg.norm(d))

    return Regularizer(value=value, prox=prox, subgrad_dist=subgrad_dist,
                       kind="l1", theta=float(theta))


@dataclass
class ProblemInstance:
    """N smooth blocks plus one regularizer over R^n.

    `reference_optimum` optionally stores a known/estimated optimal value with
    a provenance tag ("oracle", "sync-reference", ...).  `source_data` keeps
    the raw generator arrays so instances can be serialized and sharded.
    """

    blocks: list[SmoothBlock]
    regularizer: Regularizer
    dim: int
    reference_optimum: float | None = None
    reference_provenance: str | None = None
    source_data: dict | None = None

    def __post_init__(self):
        if len(self.blocks) < 1:
            raise ValueError("need at least one smooth block")
        if self.dim < 1:
            raise ValueError("dim must be positive")

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    @property
    def lipschitz_max(self) -> float:
        return max(b.lipschitz for b in self.blocks)

    @property
    def strong_convexity_min(self) -> float:
        return min(b.strong_convexity for b in self.blocks)

    @property
    def is_convex(self) -> bool:
        return all(b.curvature == "quadratic-psd" for b in self.blocks)


@dataclass
class ConsensusState:
    """Current iterate: center x0, local copies xs (N x n), duals (N x n)."""

    x0: np.ndarray
    xs: np.ndarray
    duals: np.ndarray
    k: int = 0

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=np.float64)
        self.xs = np.asarray(self.xs, dtype=np.float64)
        self.duals = np.asarray(self.duals, dtype=np.float64)
        n = self.x0.shape[0]
        if self.xs.ndim != 2 or self.duals.shape != self.xs.shape or self.xs.shape[1] != n:
            raise DimensionMismatch("xs and duals must be (N, n) matching x0")
        if self.k < 0:
            raise ValueError("iteration counter must be >= 0")

    @classmethod
    def initial(cls, instance: ProblemInstance, x0: np.ndarray | None = None) -> "ConsensusState":
        """Consensus start: all copies equal x0 (zeros by default), duals zero."""
        n, N = instance.dim, instance.n_blocks
        x0 = np.zeros(n) if x0 is None else check_vector(x0, n, "x0")
        return cls(x0=x0.copy(), xs=np.tile(x0, (N, 1)), duals=np.zeros((N, n)), k=0)


@dataclass
class KktResidual:
    """Residuals of the first-order optimality system.

    worker: max_i ||grad f_i(x_i) + lambda_i||
    master: dist(sum_i lambda_i, subdifferential of h at x0), None if the
        regularizer has no distance oracle
    consensus: max_i ||x_i - x0||
    """

    worker: float
    master: float | None
    consensus: float

    def max_component(self) -> float:
        parts = [self.worker, self.consensus]
        if self.master is not None and np.isfinite(self.master):
            parts.append(self.master)
        return float(max(parts))

    def as_tuple(self) -> tuple:
        return (self.worker, self.master, self.consensus)


def eval_objective(instance: ProblemInstance, x) -> float:
    """F(x) = sum_i f_i(x) + h(x); may be +inf where h is."""
    x = check_vector(x, instance.dim, "x")
    total = sum(b.value(x) for b in instance.blocks)
    return float(total + instance.regularizer.value(x))


def eval_augmented_lagrangian(instance: ProblemInstance, state: ConsensusState,
                              rho: float) -> float:
    """Penalized Lagrangian of the consensus problem at the given state.

    sum_i f_i(x_i) + h(x0) + sum_i lambda_i'(x_i - x0)
    + (rho/2) * sum_i ||x_i - x0||^2
    """
    if rho <= 0:
        raise ValueError("rho must be > 0")
    if state.xs.shape != (instance.n_blocks, instance.dim):
        raise DimensionMismatch(
            f"state has shape {state.xs.shape}, instance expects "
            f"({instance.n_blocks}, {instance.dim})")
    fsum = sum(b.value(state.xs[i]) for i, b in enumerate(instance.blocks))
    diff = state.xs - state.x0[None, :]
    dual_term = float(np.sum(state.duals * diff))
    penalty = 0.5 * rho * float(np.sum(diff * diff))
    return float(fsum + instance.regularizer.value(state.x0) + dual_term + penalty)


def kkt_residuals(instance: ProblemInstance, state: ConsensusState) -> KktResidual:
    """Evaluate the three optimality residuals at a consensus state."""
    if state.xs.shape != (instance.n_blocks, instance.dim):
        raise DimensionMismatch("state/instance shape mismatch")
    worker = max(
        float(np.linalg.norm(b.grad(state.xs[i]) + state.duals[i]))
        for i, b in enumerate(instance.blocks))
    consensus = float(np.max(np.linalg.norm(state.xs - state.x0[None, :], axis=1)))
    dist = instance.regularizer.subgrad_dist
    master = None if dist is None else float(dist(state.x0, state.duals.sum(axis=0)))
    return KktResidual(worker=worker, master=master, consensus=consensus)
