"""Shared helpers: small random instances with dense oracles."""

import numpy as np
import pytest

from sbl.operators import DenseOperator
from sbl.problem import SblProblem


def make_dense_instance(rng, dim, n_rows, beta=1e4, n_spikes=None):
    """Random dense-Gaussian problem with a sparse planted signal.

    Returns (problem, phi, z_true): phi is the materialized dictionary, the
    oracle side for every dense comparison.
    """
    phi = rng.normal(0.0, 1.0 / np.sqrt(n_rows), size=(n_rows, dim))
    z = np.zeros(dim)
    n_spikes = max(1, dim // 8) if n_spikes is None else n_spikes
    support = rng.choice(dim, size=n_spikes, replace=False)
    z[support] = rng.uniform(-2.0, 2.0, size=n_spikes)
    sigma = 1.0 / np.sqrt(beta)
    y = phi @ z + sigma * rng.standard_normal(n_rows)
    problem = SblProblem(y, DenseOperator(phi, kind="dense-gaussian"), beta)
    return problem, phi, z


def dense_system(phi, beta, alpha):
    """Materialized A = beta Phi^T Phi + diag(alpha)."""
    a_mat = beta * phi.T @ phi
    a_mat[np.diag_indices_from(a_mat)] += alpha
    return a_mat


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
