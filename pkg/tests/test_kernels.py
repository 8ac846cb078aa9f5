"""Backend parity, selection, and determinism of the hot CG kernels."""

import os
import subprocess
import sys

import numpy as np
import pytest

from sbl import kernels


def _random_workspace(rng, dim=64, ncol=7, n_groups=1):
    p = rng.standard_normal((dim, ncol))
    psi = rng.standard_normal((dim, ncol))
    r = rng.standard_normal((dim, ncol))
    x = rng.standard_normal((dim, ncol))
    w = np.empty((dim, ncol))
    minv = 1.0 / (1.0 + rng.random((dim, n_groups)))
    groups = rng.integers(0, n_groups, size=ncol).astype(np.int64)
    rho = rng.random(ncol) + 0.5
    pi = np.empty(ncol)
    rnorm2 = np.empty(ncol)
    return p, psi, r, x, w, minv, groups, rho, pi, rnorm2


def _clone(arrays):
    return [a.copy() for a in arrays]


needs_numba = pytest.mark.skipif(not kernels.HAS_NUMBA, reason="numba not importable")


@needs_numba
@pytest.mark.parametrize("n_groups", [1, 3])
def test_step_solution_backend_parity(rng, n_groups):
    ws = _random_workspace(rng, n_groups=n_groups)
    p, psi, r, x, w, minv, groups, rho, pi, rnorm2 = ws
    p2, psi2, r2, x2, w2, minv2, groups2, rho2, pi2, rnorm2_2 = _clone(ws)

    kernels.NUMPY_KERNELS["step_solution"](p, psi, r, x, rho, pi, rnorm2)
    kernels.NUMBA_KERNELS["step_solution"](p2, psi2, r2, x2, rho2, pi2, rnorm2_2)

    np.testing.assert_allclose(x2, x, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(r2, r, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(pi2, pi, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(rnorm2_2, rnorm2, rtol=1e-13, atol=1e-14)


@needs_numba
@pytest.mark.parametrize("use_w", [True, False])
@pytest.mark.parametrize("n_groups", [1, 3])
def test_step_direction_backend_parity(rng, use_w, n_groups):
    ws = _random_workspace(rng, n_groups=n_groups)
    p, psi, r, x, w, minv, groups, rho, pi, rnorm2 = ws
    p2, psi2, r2, x2, w2, minv2, groups2, rho2, pi2, rnorm2_2 = _clone(ws)

    kernels.NUMPY_KERNELS["step_direction"](r, p, w, minv, groups, rho, use_w)
    kernels.NUMBA_KERNELS["step_direction"](r2, p2, w2, minv2, groups2, rho2, use_w)

    np.testing.assert_allclose(p2, p, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(w2, w, rtol=1e-13, atol=1e-14)
    np.testing.assert_allclose(rho2, rho, rtol=1e-13, atol=1e-14)


@pytest.mark.parametrize("backend", ["numpy", "numba"])
def test_breakdown_freezes_column(rng, backend):
    if backend == "numba" and not kernels.HAS_NUMBA:
        pytest.skip("numba not importable")
    ks = kernels.get_kernels(backend)
    p, psi, r, x, w, minv, groups, rho, pi, rnorm2 = _random_workspace(rng)
    psi[:, 0] = 0.0  # pi_0 = <p_0, psi_0> = 0: breakdown in column 0
    x[:, 0] = 0.0
    r_before = r[:, 0].copy()

    ks["step_solution"](p, psi, r, x, rho, pi, rnorm2)

    assert pi[0] == 0.0
    np.testing.assert_array_equal(x[:, 0], np.zeros_like(x[:, 0]))
    np.testing.assert_array_equal(r[:, 0], r_before)

    # a zeroed rho freezes the direction recursion the same way
    rho[0] = 0.0
    r[:, 0] = 0.0
    ks["step_direction"](r, p, w, minv, groups, rho, True)
    assert rho[0] == 0.0
    np.testing.assert_array_equal(p[:, 0], w[:, 0])


@needs_numba
def test_thread_count_does_not_change_bits(rng):
    import numba

    ws = _random_workspace(rng, dim=512, ncol=21)
    outputs = []
    old = numba.get_num_threads()
    try:
        for threads in (1, min(4, numba.config.NUMBA_NUM_THREADS)):
            numba.set_num_threads(threads)
            p, psi, r, x, w, minv, groups, rho, pi, rnorm2 = _clone(ws)
            kernels.NUMBA_KERNELS["step_solution"](p, psi, r, x, rho, pi, rnorm2)
            kernels.NUMBA_KERNELS["step_direction"](r, p, w, minv, groups, rho, True)
            outputs.append((x, r, p, rho))
    finally:
        numba.set_num_threads(old)
    for a, b in zip(outputs[0], outputs[1]):
        np.testing.assert_array_equal(a, b)


def test_get_kernels_and_set_backend():
    assert kernels.get_kernels("numpy") is kernels.NUMPY_KERNELS
    with pytest.raises(ValueError, match="unknown backend"):
        kernels.get_kernels("fortran")
    original = kernels.backend_name()
    try:
        kernels.set_backend("numpy")
        assert kernels.backend_name() == "numpy"
        assert kernels.get_kernels() is kernels.NUMPY_KERNELS
        if kernels.HAS_NUMBA:
            kernels.set_backend("numba")
            assert kernels.backend_name() == "numba"
    finally:
        kernels.set_backend(original)


def _backend_in_subprocess(env_value):
    env = dict(os.environ)
    if env_value is None:
        env.pop("SBL_BACKEND", None)
    else:
        env["SBL_BACKEND"] = env_value
    return subprocess.run(
        [sys.executable, "-c", "import sbl.kernels as k; print(k.backend_name())"],
        capture_output=True,
        text=True,
        env=env,
    )


def test_env_var_selects_backend():
    proc = _backend_in_subprocess("numpy")
    assert proc.returncode == 0, proc.stderr
    assert proc.stdout.strip() == "numpy"

    proc = _backend_in_subprocess(None)
    assert proc.returncode == 0, proc.stderr
    expected = "numba" if kernels.HAS_NUMBA else "numpy"
    assert proc.stdout.strip() == expected


def test_env_var_rejects_unknown_backend():
    proc = _backend_in_subprocess("bogus")
    assert proc.returncode != 0
    assert "SBL_BACKEND" in proc.stderr
