"""Deterministic power-iteration estimates of extreme eigenvalues.

Used to compute gradient Lipschitz constants (2 * lambda_max) and strong
convexity moduli (2 * lambda_min) of quadratic blocks.  The start vector is a
fixed, seed-independent perturbed constant so results are reproducible.
"""

from __future__ import annotations

from typing import Callable

import numpy as np


def _start_vector(n: int) -> np.ndarray:
    v = 1.0 + 0.01 * np.linspace(0.0, 1.0, n)
    return v / np.linalg.norm(v)


def power_iteration(matvec: Callable[[np.ndarray], np.ndarray], n: int,
                    tol: float = 1e-9, max_iters: int = 20000) -> float:
    """Dominant |eigenvalue| of a symmetric operator given by `matvec`.

    Converges when the Rayleigh quotient's relative change drops below `tol`.
    Returns 0.0 for the zero operator.
    """
    v = _start_vector(n)
    lam = 0.0
    for _ in range(max_iters):
        w = matvec(v)
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            return 0.0
        v = w / norm_w
        lam_new = float(v @ matvec(v))
        if abs(lam_new - lam) <= tol * max(1.0, abs(lam_new)):
            return abs(lam_new)
        lam = lam_new
    return abs(lam)


def psd_extreme_eigenvalues(matvec: Callable[[np.ndarray], np.ndarray], n: int,
                            tol: float = 1e-9) -> tuple[float, float]:
    """(lambda_max, lambda_min) of a symmetric PSD operator.

    lambda_min is found by a second power iteration on mu*I - Q with
    mu = lambda_max; small negative round-off is clamped to zero.
    """
    lam_max = power_iteration(matvec, n, tol=tol)
    if lam_max == 0.0:
        return 0.0, 0.0
    shifted = lambda v: lam_max * v - matvec(v)
    lam_min = lam_max - power_iteration(shifted, n, tol=tol)
    return lam_max, max(0.0, lam_min)
