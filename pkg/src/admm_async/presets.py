"""Experiment specifications and named presets.

An ExperimentSpec pins everything a run needs: the instance family and
sizes, the scheme and its parameters, the arrival model, and iteration
budget.  Specs round-trip losslessly through JSON.  The named presets
reproduce the two bundled studies at full scale:

* ``fig2``   — sparse PCA, 32 workers, 1000x500 factors with 5000 nonzeros,
               theta 0.1, penalty expressed as a multiple of the largest
               factor curvature, half the workers fast (p=0.8) and half
               slow (p=0.1), at least one arrival per iteration.
* ``fig3a``  — l1 least squares, 16 workers, 200x100 blocks, theta 0.1,
               asynchronous driver at rho 500, mixed arrival rates
               (8 workers at 0.1, 4 at 0.3, 4 at 0.8).
* ``fig3b``  — same instance under the master-owned-duals scheme.
* ``fig3c``/``fig3d`` — the 200x1000 variants of the same pair (blocks no
               longer strongly convex).

A ``--scale`` factor shrinks m, n, nnz proportionally for desk-scale runs
(worker count shrinks too but is floored at a quarter of the original, and
never below 2) while keeping theta and the arrival-rate pattern.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

PRESET_NAMES = ("fig2", "fig3a", "fig3b", "fig3c", "fig3d")

PROB_PATTERNS = ("halves-01-08", "mixed-01-03-08", "uniform-05")


def arrival_probs(pattern, N: int) -> list:
    """Expand a named arrival-rate pattern to N per-worker probabilities."""
    if isinstance(pattern, (list, tuple)):
        probs = [float(p) for p in pattern]
        if len(probs) != N:
            raise ValueError(f"probability list has {len(probs)} entries, need {N}")
        return probs
    if pattern == "halves-01-08":
        half = N // 2
        return [0.1] * half + [0.8] * (N - half)
    if pattern == "mixed-01-03-08":
        half = N // 2
        quarter = N // 4
        return [0.1] * half + [0.3] * quarter + [0.8] * (N - half - quarter)
    if pattern == "uniform-05":
        return [0.5] * N
    raise ValueError(f"unknown arrival pattern {pattern!r}")


@dataclass
class ExperimentSpec:
    """Complete, JSON-serializable run configuration."""

    family: str = "lasso"           # lasso | spca
    workers: int = 16
    rows: int = 200
    dim: int = 100
    theta: float = 0.1
    density: float = 0.05           # lasso ground-truth sparsity
    noise_var: float = 0.01         # lasso noise variance
    nnz: int = 5000                 # spca nonzeros per factor
    gen_seed: int = 0
    instance_path: str | None = None  # when set, load instead of generating

    scheme: str = "ad-admm"
    rho: float | str = "advisor"    # number | "advisor" | "beta:<mult>"
    gamma: float | str = 0.0        # number | "advisor"
    tau: int = 1
    min_arrivals: int = 1
    probs: list | str = "uniform-05"
    iters: int = 1000
    seed: int = 0                   # arrival-process seed
    kkt_tol: float | None = None
    f_ref: float | str | None = None  # number | "oracle"
    record_iterates: bool = False
    preset: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentSpec":
        return cls(**json.loads(text))

    def scaled(self, scale: float) -> "ExperimentSpec":
        """Desk-scale shrink: m, n, nnz by `scale`; workers floored at a
        quarter of the original count and at 2."""
        if scale == 1.0:
            return self
        if not 0 < scale <= 1.0:
            raise ValueError("scale must lie in (0, 1]")
        spec = ExperimentSpec(**asdict(self))
        spec.rows = max(1, round(self.rows * scale))
        spec.dim = max(1, round(self.dim * scale))
        spec.nnz = max(1, round(self.nnz * scale))
        spec.workers = max(round(self.workers * scale), max(2, self.workers // 4))
        return spec


def preset_spec(name: str) -> ExperimentSpec:
    """Expand a named preset to a full ExperimentSpec."""
    if name == "fig2":
        return ExperimentSpec(
            family="spca", workers=32, rows=1000, dim=500, theta=0.1,
            nnz=5000, gen_seed=2020, scheme="ad-admm", rho="beta:3",
            gamma=0.0, tau=1, min_arrivals=1, probs="halves-01-08",
            iters=5000, seed=1, preset="fig2")
    if name in ("fig3a", "fig3b", "fig3c", "fig3d"):
        dim = 100 if name in ("fig3a", "fig3b") else 1000
        scheme = "ad-admm" if name in ("fig3a", "fig3c") else "alternative"
        return ExperimentSpec(
            family="lasso", workers=16, rows=200, dim=dim, theta=0.1,
            density=0.05, noise_var=0.01, gen_seed=2015, scheme=scheme,
            rho=500.0, gamma=0.0, tau=1, min_arrivals=1,
            probs="mixed-01-03-08", iters=5000, seed=1, f_ref="oracle",
            preset=name)
    raise ValueError(f"unknown preset {name!r}; choose from {PRESET_NAMES}")
