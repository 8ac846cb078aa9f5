"""Exact dense EM and the Woodbury covariance path.

These materialize the D x D posterior covariance and exist as correctness
oracles and timing baselines for the matrix-free solver.  Guarded at
D <= 4096: beyond that the cubic cost and quadratic memory defeat the point.
"""

import numpy as np
from scipy.linalg import cho_factor, cho_solve

MATERIALIZE_GUARD = 4096

# same floor/clamp as the matrix-free loop so trajectories are comparable
FLOOR_EPS = 1e-12
CLAMP_MAX = 1e12


class DensePosterior:
    """Posterior mean and full covariance of z given y and alpha."""

    def __init__(self, mu, sigma):
        self.mu = mu
        self.sigma = sigma


def _guard(value, label):
    if value > MATERIALIZE_GUARD:
        raise ValueError(f"dense path guard: {label} = {value} exceeds {MATERIALIZE_GUARD}")


def exact_e_step(problem, alpha, _phi=None, _gram=None):
    """Direct factorization of A = beta Phi^T Phi + diag(alpha).

    Sigma = A^{-1} via a symmetric (Cholesky) factorization, mu = beta Sigma
    Phi^T y.  The private _phi/_gram arguments let run_em reuse the
    materialized dictionary across iterations.
    """
    _guard(problem.dim, "D")
    phi = problem.op.materialize() if _phi is None else _phi
    gram = phi.T @ phi if _gram is None else _gram
    A = problem.beta * gram
    A[np.diag_indices_from(A)] += alpha
    factor = cho_factor(A, lower=True)
    mu = cho_solve(factor, problem.beta * (phi.T @ problem.y))
    sigma = cho_solve(factor, np.eye(problem.dim))
    sigma = 0.5 * (sigma + sigma.T)
    return DensePosterior(mu, sigma)


def woodbury_e_step(problem, alpha):
    """Covariance through the N x N inner inverse:

    Sigma = C - C Phi^T (I/beta + Phi C Phi^T)^{-1} Phi C,  C = diag(alpha)^{-1}

    The I/beta term keeps this numerically identical to exact_e_step.
    """
    _guard(problem.dim, "D")
    _guard(problem.op.n_rows, "N")
    phi = problem.op.materialize()
    c = 1.0 / np.asarray(alpha, dtype=np.float64)
    cpt = c[:, None] * phi.T
    inner = phi @ cpt
    inner[np.diag_indices_from(inner)] += 1.0 / problem.beta
    factor = cho_factor(inner, lower=True)
    sigma = np.diag(c) - cpt @ cho_solve(factor, cpt.T)
    sigma = 0.5 * (sigma + sigma.T)
    mu = problem.beta * (sigma @ (phi.T @ problem.y))
    return DensePosterior(mu, sigma)


def run_em(problem, iterations, z_true=None, e_step_kind="exact"):
    """Alternate the dense E-step with the precision update for T iterations.

    The precision update is skipped after the final E-step, so the returned
    alpha is the one the last posterior was computed under.  When z_true is
    given, the per-iteration NRMSE of mu is traced.

    e_step_kind selects "exact" (direct factorization) or "woodbury" (the
    IRLS-style N x N path).
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if e_step_kind not in ("exact", "woodbury"):
        raise ValueError(f"unknown e_step_kind {e_step_kind!r}")
    _guard(problem.dim, "D")
    phi = gram = None
    if e_step_kind == "exact":
        phi = problem.op.materialize()
        gram = phi.T @ phi

    alpha = np.ones(problem.dim)
    trace = []
    post = None
    for t in range(1, iterations + 1):
        if e_step_kind == "exact":
            post = exact_e_step(problem, alpha, _phi=phi, _gram=gram)
        else:
            post = woodbury_e_step(problem, alpha)
        if z_true is not None:
            trace.append(100.0 * np.linalg.norm(post.mu - z_true) / np.linalg.norm(z_true))
        if t < iterations:
            second_moment = post.mu**2 + np.diag(post.sigma)
            alpha = np.minimum(1.0 / np.maximum(second_moment, FLOOR_EPS), CLAMP_MAX)
    return alpha, post, np.asarray(trace)


def log_marginal_likelihood(problem, alpha):
    """log N(y; 0, I/beta + Phi diag(alpha)^{-1} Phi^T), the EM objective."""
    _guard(problem.op.n_rows, "N")
    phi = problem.op.materialize()
    cov = (phi / np.asarray(alpha, dtype=np.float64)) @ phi.T
    cov[np.diag_indices_from(cov)] += 1.0 / problem.beta
    factor = cho_factor(cov, lower=True)
    logdet = 2.0 * np.sum(np.log(np.diag(factor[0])))
    quad = problem.y @ cho_solve(factor, problem.y)
    n = problem.op.n_rows
    return -0.5 * (n * np.log(2.0 * np.pi) + logdet + quad)
