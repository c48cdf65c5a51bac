"""Independent reference solver for convex instances.

An accelerated proximal-gradient method (with adaptive restart) on the
aggregate problem min_w sum_i f_i(w) + h(w).  It shares no machinery with
the consensus drivers, so its optimum serves as an independent check of
what they converge to.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import ProblemInstance, eval_objective
from .spectral import power_iteration


@dataclass
class OracleSolution:
    x: np.ndarray
    objective: float
    residual: float     # norm of the prox-gradient mapping at x
    iterations: int
    converged: bool


def _aggregate_gradient(instance: ProblemInstance):
    """(grad of sum_i f_i, Lipschitz bound).  Quadratic blocks are summed
    into one dense form so per-iteration cost is a single matvec."""
    if all(b.is_quadratic for b in instance.blocks):
        Q = np.zeros((instance.dim, instance.dim))
        c = np.zeros(instance.dim)
        for b in instance.blocks:
            Q = Q + np.asarray(b.quad_q)
            c = c + b.quad_c
        L = 2.0 * power_iteration(lambda v: Q @ v, instance.dim)
        return (lambda w: 2.0 * (Q @ w - c)), L

    def grad(w):
        g = np.zeros_like(w)
        for b in instance.blocks:
            g += b.grad(w)
        return g

    return grad, sum(b.lipschitz for b in instance.blocks)


def proximal_gradient_reference(instance: ProblemInstance, tol: float = 1e-10,
                                max_iters: int = 200000,
                                x_init=None) -> OracleSolution:
    """Solve the aggregate problem to prox-gradient residual <= tol.

    Accelerated steps with function-value restart; fixed step 1/L.  Only
    meaningful for convex instances — refuses indefinite blocks.
    """
    if any(b.curvature == "quadratic-indefinite" for b in instance.blocks):
        raise ValueError("reference solver requires convex blocks")
    grad, L = _aggregate_gradient(instance)
    if L <= 0:
        L = 1.0
    step = 1.0 / L
    prox = instance.regularizer.prox
    n = instance.dim
    x = np.zeros(n) if x_init is None else np.asarray(x_init, dtype=float).copy()
    y = x.copy()
    t = 1.0
    f_prev = math.inf
    residual = math.inf
    for it in range(1, max_iters + 1):
        x_new = prox(y - step * grad(y), step)
        residual = float(np.linalg.norm((y - x_new) / step - grad(y) + grad(x_new)))
        if residual <= tol:
            x = x_new
            return OracleSolution(x=x, objective=eval_objective(instance, x),
                                  residual=residual, iterations=it,
                                  converged=True)
        f_new = eval_objective(instance, x_new)
        if f_new > f_prev:
            # restart momentum; plain proximal step from the last iterate
            t = 1.0
            y = x.copy()
            f_prev = math.inf
            continue
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t, f_prev = x_new, t_new, f_new
    return OracleSolution(x=x, objective=eval_objective(instance, x),
                          residual=residual, iterations=max_iters,
                          converged=False)
