"""Hot update kernels for the blocked CG loop, in two interchangeable backends.

The per-step work that is not a matrix application is a handful of fused
passes over the D x Q workspaces: column dot products, the solution/residual
update, and the search-direction recursion.  Those passes are implemented
twice, once with numba @njit(parallel) and once in pure numpy, with
identical signatures and identical per-column reduction order.

Backend selection: env var SBL_BACKEND set to "numba" or "numpy".  Unset
picks numba when importable, numpy otherwise.  Every reduction is sequential
within its column, so results never depend on the thread count.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAS_NUMBA = True
except ImportError:
    HAS_NUMBA = False


# ---------------------------------------------------------------- numpy ----

def _np_step_solution(p, psi, r, x, rho, pi_out, rnorm2_out):
    # pi_q = <p_q, psi_q>; gamma_q = rho_q/pi_q (0 on breakdown);
    # x += p Gamma; r -= psi Gamma; rnorm2_q = ||r_q||^2
    np.einsum("jq,jq->q", p, psi, out=pi_out)
    gamma = np.divide(rho, pi_out, out=np.zeros_like(rho), where=pi_out != 0.0)
    x += p * gamma
    r -= psi * gamma
    np.einsum("jq,jq->q", r, r, out=rnorm2_out)


def _np_step_direction(r, p, w, minv, groups, rho, use_w):
    # w = M^{-1} r; eta_q = rho_new/rho_old (0 once a column froze);
    # p <- w + p Eta (standard) or r + p Eta (printed recursion)
    if minv.shape[1] == 1:
        np.multiply(r, minv, out=w)
    else:
        np.multiply(r, minv[:, groups], out=w)
    rho_new = np.einsum("jq,jq->q", r, w)
    eta = np.divide(rho_new, rho, out=np.zeros_like(rho), where=rho != 0.0)
    p *= eta
    p += w if use_w else r
    rho[:] = rho_new


NUMPY_KERNELS = {
    "step_solution": _np_step_solution,
    "step_direction": _np_step_direction,
}


# ---------------------------------------------------------------- numba ----

if HAS_NUMBA:

    @njit(cache=True, parallel=True)
    def _nb_step_solution(p, psi, r, x, rho, pi_out, rnorm2_out):
        dim, ncol = p.shape
        for q in prange(ncol):
            acc = 0.0
            for j in range(dim):
                acc += p[j, q] * psi[j, q]
            pi_out[q] = acc
            gamma = rho[q] / acc if acc != 0.0 else 0.0
            rn = 0.0
            for j in range(dim):
                x[j, q] += gamma * p[j, q]
                r[j, q] -= gamma * psi[j, q]
                rn += r[j, q] * r[j, q]
            rnorm2_out[q] = rn

    @njit(cache=True, parallel=True)
    def _nb_step_direction(r, p, w, minv, groups, rho, use_w):
        dim, ncol = p.shape
        for q in prange(ncol):
            g = groups[q]
            acc = 0.0
            for j in range(dim):
                wj = r[j, q] * minv[j, g]
                w[j, q] = wj
                acc += r[j, q] * wj
            eta = acc / rho[q] if rho[q] != 0.0 else 0.0
            if use_w:
                for j in range(dim):
                    p[j, q] = w[j, q] + eta * p[j, q]
            else:
                for j in range(dim):
                    p[j, q] = r[j, q] + eta * p[j, q]
            rho[q] = acc

    NUMBA_KERNELS = {
        "step_solution": _nb_step_solution,
        "step_direction": _nb_step_direction,
    }
else:
    NUMBA_KERNELS = None


# ------------------------------------------------------------- selection ----

def _default_backend():
    env = os.environ.get("SBL_BACKEND", "").strip().lower()
    if env == "numpy":
        return "numpy"
    if env == "numba":
        if not HAS_NUMBA:
            raise ImportError("SBL_BACKEND=numba but numba is not importable")
        return "numba"
    if env:
        raise ValueError(f"SBL_BACKEND must be 'numba' or 'numpy', got {env!r}")
    return "numba" if HAS_NUMBA else "numpy"


_ACTIVE_NAME = _default_backend()


def get_kernels(name=None):
    """Return the kernel set for *name* (default: the active backend)."""
    name = _ACTIVE_NAME if name is None else name
    if name == "numpy":
        return NUMPY_KERNELS
    if name == "numba":
        if NUMBA_KERNELS is None:
            raise ImportError("numba backend requested but numba is not importable")
        return NUMBA_KERNELS
    raise ValueError(f"unknown backend {name!r}")


def set_backend(name):
    """Switch the active backend ('numba' or 'numpy') at runtime."""
    global _ACTIVE_NAME
    get_kernels(name)
    _ACTIVE_NAME = name


def backend_name():
    return _ACTIVE_NAME


def step_solution(p, psi, r, x, rho, pi_out, rnorm2_out):
    get_kernels()["step_solution"](p, psi, r, x, rho, pi_out, rnorm2_out)


def step_direction(r, p, w, minv, groups, rho, use_w):
    get_kernels()["step_direction"](r, p, w, minv, groups, rho, use_w)
