"""Parallel preconditioned conjugate gradient over many right-hand sides.

Solves A X = B for an implicit SPD system A and a D x Q block of right-hand
sides simultaneously.  Per-column scalars (rho, pi, gamma, eta) live in
length-Q vectors and every column advances in lockstep; the stopping rule is
the aggregate Frobenius ratio ||R||_F / ||B||_F.  The elementwise update
passes are delegated to sbl.kernels so they run on the selected backend.
"""

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .operators import ShapeMismatchError


class DivergenceError(RuntimeError):
    """CG produced non-finite values; carries the offending step index."""

    def __init__(self, step, context=""):
        msg = f"non-finite residual at CG step {step}"
        if context:
            msg = f"{msg} ({context})"
        super().__init__(msg)
        self.step = step


@dataclass(frozen=True)
class Preconditioner:
    """Diagonal preconditioner M = diag(beta * theta + alpha)."""

    m: np.ndarray
    theta: np.ndarray | None = None
    alpha: np.ndarray | None = None

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.ndim != 1 or not np.all(m > 0):
            raise ValueError("preconditioner diagonal must be 1-D and positive")
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls, dim):
        return cls(m=np.ones(dim))


@dataclass(frozen=True)
class CgConfig:
    """Solver knobs: step cap U, Frobenius tolerance, preconditioner policy.

    theta_policy is "all-ones", "jacobi", "none" (M = I), or a custom
    positive length-D vector.  printed_recursion=True switches to the
    unpreconditioned direction recursion (P starts at B and updates from R
    instead of W); kept for study, not for production use.
    """

    max_steps: int = 400
    tolerance: float = 1e-4
    theta_policy: object = "all-ones"
    printed_recursion: bool = False

    def __post_init__(self):
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.tolerance <= 0:
            raise ValueError("tolerance must be positive")


@dataclass(frozen=True)
class CgReport:
    solution: np.ndarray
    steps_taken: int
    final_relative_residual: float
    converged: bool
    breakdown_columns: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))


def make_preconditioner(policy, op, beta, alpha):
    """Build the diagonal preconditioner for beta and the current alpha.

    Parameters
    ----------
    policy : "all-ones" | "jacobi" | "none" | array_like
        all-ones sets theta = 1 (favorable for near-orthonormal columns),
        jacobi sets theta to the exact column squared norms, none yields
        M = I, and an explicit positive vector is used as given.
    op : LinearOperator
    beta : float
    alpha : (D,) positive vector
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    if not np.all(alpha > 0):
        raise ValueError("alpha entries must all be positive")
    if isinstance(policy, str):
        if policy == "all-ones":
            theta = np.ones(op.n_cols)
        elif policy == "jacobi":
            theta = op.column_sq_norms()
        elif policy == "none":
            return Preconditioner.identity(op.n_cols)
        else:
            raise ValueError(f"unknown theta policy {policy!r}")
    else:
        theta = np.asarray(policy, dtype=np.float64)
        if theta.shape != (op.n_cols,) or not np.all(theta > 0):
            raise ValueError("custom theta must be a positive length-D vector")
    return Preconditioner(m=beta * theta + alpha, theta=theta, alpha=alpha)


def _pcg_loop(apply_fn, B, minv, groups, cfg):
    """Run the blocked PCG iteration; minv is (D, G) with a group per column."""
    B = np.ascontiguousarray(B, dtype=np.float64)
    dim, ncol = B.shape
    X = np.zeros_like(B)
    bnorm = np.linalg.norm(B)
    none_frozen = np.empty(0, dtype=np.int64)
    if bnorm == 0.0:
        return CgReport(X, 0, 0.0, True, none_frozen)
    # entry check: with X = 0 the relative residual is exactly 1
    if 1.0 <= cfg.tolerance:
        return CgReport(X, 0, 1.0, True, none_frozen)

    R = B.copy()
    P = np.zeros_like(B)
    W = np.empty_like(B)
    rho = np.ones(ncol)
    pi = np.empty(ncol)
    rnorm2 = np.empty(ncol)
    frozen = np.zeros(ncol, dtype=bool)
    use_w = not cfg.printed_recursion

    # initialization falls out of the direction kernel with P = 0, rho = 1:
    # W = M^{-1}B, rho = <R, W>, P = W (standard) or P = R = B (printed)
    kernels.step_direction(R, P, W, minv, groups, rho, use_w)

    steps = 0
    delta = 1.0
    for u in range(1, cfg.max_steps + 1):
        psi = np.ascontiguousarray(apply_fn(P))
        kernels.step_solution(P, psi, R, X, rho, pi, rnorm2)
        steps = u
        frozen |= pi == 0.0
        delta = np.sqrt(rnorm2.sum()) / bnorm
        if not np.isfinite(delta):
            raise DivergenceError(u)
        if delta <= cfg.tolerance:
            break
        if u < cfg.max_steps:
            kernels.step_direction(R, P, W, minv, groups, rho, use_w)

    return CgReport(X, steps, float(delta), delta <= cfg.tolerance, np.flatnonzero(frozen))


def solve(sys, B, pre, cfg):
    """Solve sys @ X = B for all columns of B at once.

    Parameters
    ----------
    sys : SystemMatrix
        Implicit SPD matrix A = beta Phi^T Phi + diag(alpha).
    B : (D, Q) or (D,) array
        Right-hand sides, one per column.
    pre : Preconditioner
    cfg : CgConfig

    Returns
    -------
    CgReport
        solution (same leading shape as B), steps taken, final aggregate
        relative residual, convergence flag, and any frozen columns
        (breakdown pi_q = 0, those columns stop updating).

    Raises
    ------
    DivergenceError
        If the residual turns non-finite.
    """
    B = np.asarray(B, dtype=np.float64)
    single = B.ndim == 1
    if single:
        B = B[:, None]
    if B.ndim != 2 or B.shape[0] != sys.dim:
        raise ShapeMismatchError("cg right-hand side", (sys.dim, "Q"), B.shape)
    if pre.m.shape != (sys.dim,):
        raise ShapeMismatchError("preconditioner diagonal", (sys.dim,), pre.m.shape)
    minv = (1.0 / pre.m)[:, None]
    groups = np.zeros(B.shape[1], dtype=np.int64)
    report = _pcg_loop(sys.apply, B, minv, groups, cfg)
    if single:
        report = CgReport(
            report.solution[:, 0],
            report.steps_taken,
            report.final_relative_residual,
            report.converged,
            report.breakdown_columns,
        )
    return report


def solve_blocked(systems, Bs, pres, cfg):
    """Solve several independent systems in one lockstep PCG run.

    Column blocks are concatenated; each block q uses its own system apply
    and its own preconditioner column.  The stopping rule aggregates the
    Frobenius residual over ALL blocks, matching the single-call contract
    for multi-task inference.

    Returns (CgReport over the concatenated columns, list of column slices).
    """
    if not systems or len(systems) != len(Bs) or len(systems) != len(pres):
        raise ValueError("systems, Bs, and pres must be equal-length nonempty lists")
    dim = systems[0].dim
    for s in systems:
        if s.dim != dim:
            raise ShapeMismatchError("blocked system dims", (dim,), (s.dim,))
    slices = []
    offset = 0
    for B in Bs:
        if B.ndim != 2 or B.shape[0] != dim:
            raise ShapeMismatchError("blocked right-hand side", (dim, "Q"), B.shape)
        slices.append(slice(offset, offset + B.shape[1]))
        offset += B.shape[1]
    B = np.concatenate([np.asarray(b, dtype=np.float64) for b in Bs], axis=1)
    minv = np.stack([1.0 / p.m for p in pres], axis=1)
    groups = np.concatenate(
        [np.full(sl.stop - sl.start, g, dtype=np.int64) for g, sl in enumerate(slices)]
    )

    def apply_fn(V):
        return np.concatenate([systems[g].apply(V[:, sl]) for g, sl in enumerate(slices)], axis=1)

    report = _pcg_loop(apply_fn, B, minv, groups, cfg)
    return report, slices
