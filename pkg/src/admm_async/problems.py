"""Problem generators and closed-form subproblem solvers.

Two experiment families are provided:

* least-squares with l1 penalty ("lasso"):
      min_w  sum_i ||A_i w - b_i||^2 + theta * ||w||_1
* sparse principal components ("spca", non-convex):
      min_w  - sum_j w' B_j' B_j w + theta * ||w||_1

plus the per-iteration building blocks every driver uses: the shrinkage
operator, the exact solver for quadratic worker subproblems, an accelerated
inner solver for general smooth blocks, and the center (x0) update.
"""

from __future__ import annotations

import math

import numpy as np
import scipy.linalg
import scipy.sparse

from .model import (DimensionMismatch, NumericError, ProblemInstance,
                    Regularizer, SmoothBlock, l1_regularizer)
from .spectral import power_iteration, psd_extreme_eigenvalues


def soft_threshold(v: np.ndarray, kappa: float) -> np.ndarray:
    """Componentwise sign(v_j) * max(|v_j| - kappa, 0); kappa >= 0."""
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    v = np.asarray(v, dtype=np.float64)
    return np.sign(v) * np.maximum(np.abs(v) - kappa, 0.0)


def worker_factorization(block: SmoothBlock, rho: float):
    """LU factorization of (2Q + rho*I), cached per (block, rho).

    The matrix is iteration-invariant, so each worker factors it once per
    penalty value.  Raises NumericError when the system is numerically
    singular (possible for indefinite blocks with rho below the curvature).
    """
    key = float(rho)
    cached = block._factor_cache.get(key)
    if cached is not None:
        return cached
    if not block.is_quadratic:
        raise ValueError("factorization requires a quadratic block")
    n = block.quad_q.shape[0]
    M = 2.0 * block.quad_q + rho * np.eye(n)
    lu, piv = scipy.linalg.lu_factor(M, check_finite=False)
    diag = np.abs(np.diag(lu))
    if diag.min() <= 1e-14 * max(diag.max(), 1.0):
        raise NumericError(
            f"(2Q + rho*I) is numerically singular at rho={rho}: "
            f"|U| diagonal spans [{diag.min():.3e}, {diag.max():.3e}]")
    block._factor_cache[key] = (lu, piv)
    return lu, piv


def solve_worker_quadratic(block: SmoothBlock, lam: np.ndarray,
                           x0_ref: np.ndarray, rho: float) -> np.ndarray:
    """Stationary point of f_i(x) + x'lam + (rho/2)||x - x0_ref||^2.

    For quadratic f_i(x) = x'Qx - 2c'x + r this is the unique solution of
    (2Q + rho*I) x = rho*x0_ref - lam + 2c.  When rho exceeds the block's
    Lipschitz constant this is the global minimizer; for indefinite Q with
    smaller rho the stationary system is solved regardless (the subproblem
    minimum may not exist, which is how divergent penalty choices show up).
    """
    lu_piv = worker_factorization(block, rho)
    rhs = rho * x0_ref - lam + 2.0 * block.quad_c
    x = scipy.linalg.lu_solve(lu_piv, rhs, check_finite=False)
    if not np.all(np.isfinite(x)):
        raise NumericError("worker subproblem solve produced non-finite values")
    return x


def solve_worker_smooth(block: SmoothBlock, lam: np.ndarray, x0_ref: np.ndarray,
                        rho: float, tol: float = 1e-10,
                        max_iters: int = 100000) -> np.ndarray:
    """Accelerated gradient inner solver for non-quadratic smooth blocks.

    Minimizes f_i(x) + x'lam + (rho/2)||x - x0_ref||^2 to gradient norm
    <= tol * (1 + initial gradient norm); requires rho > block.lipschitz so
    the subproblem is strongly convex.
    """
    def sub_grad(x):
        return block.grad(x) + lam + rho * (x - x0_ref)

    L_sub = block.lipschitz + rho
    step = 1.0 / L_sub
    x = x0_ref.copy()
    y = x.copy()
    t = 1.0
    g0 = float(np.linalg.norm(sub_grad(x)))
    target = tol * (1.0 + g0)
    for _ in range(max_iters):
        g = sub_grad(y)
        x_new = y - step * g
        if float(np.linalg.norm(sub_grad(x_new))) <= target:
            return x_new
        t_new = 0.5 * (1.0 + math.sqrt(1.0 + 4.0 * t * t))
        y = x_new + ((t - 1.0) / t_new) * (x_new - x)
        x, t = x_new, t_new
    raise NumericError("inner subproblem solver did not reach tolerance")


def solve_worker(block: SmoothBlock, lam: np.ndarray, x0_ref: np.ndarray,
                 rho: float) -> np.ndarray:
    """Dispatch: closed form for quadratic blocks, inner solver otherwise."""
    if block.is_quadratic:
        return solve_worker_quadratic(block, lam, x0_ref, rho)
    return solve_worker_smooth(block, lam, x0_ref, rho)


def solve_master_x0(reg: Regularizer, sum_lambda: np.ndarray, sum_x: np.ndarray,
                    N: int, rho: float, gamma: float,
                    x0_prev: np.ndarray) -> np.ndarray:
    """Center update: minimize
        h(x0) - x0'sum_lambda + (rho/2) sum_i ||x_i - x0||^2
        + (gamma/2) ||x0 - x0_prev||^2

    which is one prox call of h at v = (sum_lambda + rho*sum_x +
    gamma*x0_prev) / (N*rho + gamma) with weight 1/(N*rho + gamma).
    """
    if rho <= 0:
        raise ValueError("rho must be > 0")
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    denom = N * rho + gamma
    v = (sum_lambda + rho * sum_x + gamma * x0_prev) / denom
    return reg.prox(v, 1.0 / denom)


# ---------------------------------------------------------------------------
# instance builders (shared by generators and the serialization loader)
# ---------------------------------------------------------------------------

def make_lasso_instance(A_list, b_list, theta: float,
                        w0: np.ndarray | None = None) -> ProblemInstance:
    """Assemble the l1-penalized least-squares instance from raw data.

    Per block: f_i(w) = ||A_i w - b_i||^2, i.e. Q = A_i'A_i, c = A_i'b_i,
    r = ||b_i||^2, with L = 2*lambda_max(Q) and strong convexity
    2*lambda_min(Q) (exactly 0 when m < n).
    """
    if len(A_list) != len(b_list) or not A_list:
        raise ValueError("need matching non-empty A/b lists")
    n = A_list[0].shape[1]
    blocks = []
    for A, b in zip(A_list, b_list):
        A = np.ascontiguousarray(A, dtype=np.float64)
        b = np.ascontiguousarray(b, dtype=np.float64)
        m = A.shape[0]
        if A.shape[1] != n or b.shape[0] != m:
            raise DimensionMismatch("inconsistent block shapes")
        Q = A.T @ A
        c = A.T @ b
        r = float(b @ b)
        matvec = lambda v, A=A: A.T @ (A @ v)
        if m >= n:
            lmax, lmin = psd_extreme_eigenvalues(matvec, n)
        else:
            lmax, lmin = power_iteration(matvec, n), 0.0
        blocks.append(SmoothBlock.quadratic(
            Q, c, r,
            curvature="quadratic-psd",
            lipschitz=2.0 * lmax,
            strong_convexity=2.0 * lmin,
            value=lambda w, A=A, b=b: float(np.sum((A @ w - b) ** 2)),
            grad=lambda w, A=A, b=b: 2.0 * (A.T @ (A @ w - b)),
        ))
    data = {"family": "lasso", "A": list(A_list), "b": list(b_list),
            "theta": float(theta), "w0": w0}
    return ProblemInstance(blocks=blocks, regularizer=l1_regularizer(theta),
                           dim=n, source_data=data)


def make_spca_instance(B_list, theta: float) -> ProblemInstance:
    """Assemble the sparse-PCA instance from sparse factor matrices.

    Per block: f_j(w) = -w'B_j'B_j w (concave quadratic, Q = -B_j'B_j),
    with L = 2*lambda_max(B_j'B_j).  The dense Q needed for factorizations
    is materialized lazily.
    """
    if not B_list:
        raise ValueError("need at least one factor matrix")
    B_list = [scipy.sparse.csr_matrix(B, dtype=np.float64) for B in B_list]
    n = B_list[0].shape[1]
    blocks = []
    for B in B_list:
        if B.shape[1] != n:
            raise DimensionMismatch("inconsistent block shapes")
        lmax = power_iteration(lambda v, B=B: B.T @ (B @ v), n)
        block = SmoothBlock(
            value=lambda w, B=B: -float(np.sum((B @ w) ** 2)),
            grad=lambda w, B=B: -2.0 * (B.T @ (B @ w)),
            lipschitz=2.0 * lmax,
            strong_convexity=0.0,
            curvature="quadratic-indefinite",
            quad_q=None,
            quad_c=np.zeros(n),
            quad_r=0.0,
        )
        # dense Q on demand only; full-size instances never factor unless run
        block.quad_q = _LazyNegGram(B, n)
        blocks.append(block)
    data = {"family": "spca", "B": B_list, "theta": float(theta)}
    return ProblemInstance(blocks=blocks, regularizer=l1_regularizer(theta),
                           dim=n, source_data=data)


class _LazyNegGram:
    """Array-like proxy for -(B'B) that densifies on first use."""

    def __init__(self, B, n):
        self._B = B
        self.shape = (n, n)
        self._dense = None

    def _materialize(self) -> np.ndarray:
        if self._dense is None:
            self._dense = -(self._B.T @ self._B).toarray()
        return self._dense

    def __array__(self, dtype=None):
        d = self._materialize()
        return d if dtype is None else d.astype(dtype)

    def __matmul__(self, other):
        return self._materialize() @ other

    def __rmul__(self, scalar):
        return scalar * self._materialize()

    def __mul__(self, scalar):
        return self._materialize() * scalar


def gen_lasso(N: int, m: int, n: int, theta: float, noise_var: float = 0.01,
              density: float = 0.05, seed: int = 0) -> ProblemInstance:
    """Sample an l1 least-squares instance.

    A_i entries are standard normal; the ground truth w0 has
    ceil(density * n) standard-normal nonzeros; b_i = A_i w0 + noise with
    noise variance `noise_var`.  Deterministic given the seed.
    """
    if N < 1 or m < 1 or n < 1:
        raise ValueError("N, m, n must be >= 1")
    if theta <= 0:
        raise ValueError("theta must be > 0")
    if not 0.0 <= density <= 1.0:
        raise ValueError("density must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    w0 = np.zeros(n)
    nnz = math.ceil(density * n)
    if nnz > 0:
        support = rng.choice(n, size=nnz, replace=False)
        w0[support] = rng.standard_normal(nnz)
    A_list, b_list = [], []
    sig = math.sqrt(noise_var)
    for _ in range(N):
        A = rng.standard_normal((m, n))
        b = A @ w0 + sig * rng.standard_normal(m)
        A_list.append(A)
        b_list.append(b)
    inst = make_lasso_instance(A_list, b_list, theta, w0=w0)
    inst.source_data.update({"seed": seed, "noise_var": float(noise_var),
                             "density": float(density)})
    return inst


def gen_sparse_pca(N: int, m: int, n: int, theta: float, nnz: int,
                   seed: int = 0) -> ProblemInstance:
    """Sample a sparse-PCA instance with exactly `nnz` entries per factor.

    Nonzero positions are uniform without replacement over the m x n grid
    (the placement distribution is an assumption; only "sparse random" is
    prescribed), values standard normal.  Deterministic given the seed.
    """
    if N < 1 or m < 1 or n < 1:
        raise ValueError("N, m, n must be >= 1")
    if not 0 <= nnz <= m * n:
        raise ValueError("nnz must lie in [0, m*n]")
    rng = np.random.default_rng(seed)
    B_list = []
    for _ in range(N):
        flat = rng.choice(m * n, size=nnz, replace=False)
        rows, cols = np.unravel_index(np.sort(flat), (m, n))
        vals = rng.standard_normal(nnz)
        B = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(m, n)).tocsr()
        B_list.append(B)
    inst = make_spca_instance(B_list, theta)
    inst.source_data.update({"seed": seed, "nnz": int(nnz)})
    return inst
