"""Probe vectors and the stochastic diagonal estimator.

For any square matrix M and probe vectors p_k with zero-mean i.i.d. entries,
the ratio of <p_k, x_k>-style per-coordinate products to the probe second
moments is an unbiased estimate of diag(M) given x_k = M p_k.  Rademacher
probes make the denominator exactly K, and each coordinate's estimator
standard deviation is governed by the off-diagonal mass of its row.
"""

import numpy as np


def draw_rademacher(dim, n_probes, rng):
    """D x K matrix of i.i.d. +-1 entries with equal probability."""
    if dim < 1 or n_probes < 1:
        raise ValueError("dim and n_probes must be >= 1")
    return rng.integers(0, 2, size=(dim, n_probes)).astype(np.float64) * 2.0 - 1.0


def _check_same_shape(probes, X):
    probes = np.asarray(probes, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    if probes.ndim != 2 or probes.shape != X.shape:
        raise ValueError(f"probes and solutions must share a (D, K) shape, got {probes.shape} vs {X.shape}")
    return probes, X


def estimate_diagonal_rademacher(probes, X):
    """s_j = (1/K) sum_k probes_jk * X_jk, unbiased for diag(M) when X = M probes."""
    probes, X = _check_same_shape(probes, X)
    return np.mean(probes * X, axis=1)


def estimate_diagonal_general(probes, X):
    """Ratio estimator for any zero-mean i.i.d. probe law; reduces to the
    Rademacher rule when entries are +-1."""
    probes, X = _check_same_shape(probes, X)
    denom = np.einsum("jk,jk->j", probes, probes)
    if np.any(denom == 0.0):
        bad = int(np.flatnonzero(denom == 0.0)[0])
        raise ZeroDivisionError(f"zero probe mass at coordinate {bad}")
    return np.einsum("jk,jk->j", probes, X) / denom


def estimator_std(M, n_probes):
    """Exact per-coordinate standard deviation of the Rademacher estimate.

    nu_j = sqrt((1/K) * sum_{j' != j} M_{j,j'}^2), a test oracle for small
    explicit matrices.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"M must be square, got {M.shape}")
    row_sq = np.einsum("ij,ij->i", M, M)
    off = row_sq - np.diag(M) ** 2
    return np.sqrt(np.maximum(off, 0.0) / n_probes)


def active_std_bound(phi_active, beta, n_probes):
    """Limiting std bound over active coordinates at convergence.

    With the identity scaling choice, the bound is
    ||Phi_S^T Phi_S - I||_2 / (beta * sigma_min(Phi_S)^2 * sqrt(K)).
    Returns inf when Phi_S^T Phi_S is singular.
    """
    phi_active = np.asarray(phi_active, dtype=np.float64)
    if phi_active.ndim != 2 or phi_active.shape[1] == 0:
        raise ValueError("phi_active must be a nonempty N x |S| matrix")
    gram_eigs = np.linalg.eigvalsh(phi_active.T @ phi_active)
    smallest = gram_eigs[0]
    if smallest <= 0.0:
        return np.inf
    deviation = np.max(np.abs(gram_eigs - 1.0))
    return deviation / (beta * smallest * np.sqrt(n_probes))
