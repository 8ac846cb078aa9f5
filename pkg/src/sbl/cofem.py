"""Covariance-free EM for sparse Bayesian learning.

Each iteration solves one blocked linear system A X = [probes | beta Phi^T y]
under the current precision vector alpha, reads the posterior mean off the
last column, estimates the covariance diagonal from the probe columns, and
updates alpha in closed form.  No D x D matrix is ever materialized.

Variants: a shared-precision multi-task loop (all tasks' systems solved in
one blocked CG call) and a non-negative prior whose precision update uses
the rectified second moment; its point estimate is the filtered mode.
"""

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import erfc, erfcx

from . import cg as cg_mod
from .cg import CgConfig, DivergenceError, make_preconditioner
from .operators import SystemMatrix
from .probes import draw_rademacher, estimate_diagonal_rademacher
from .problem import substream

_PROBE_STREAM = 3

VARIANTS = ("standard", "nonneg")


@dataclass(frozen=True)
class CofemConfig:
    iterations: int = 50
    probes: int = 20
    cg: CgConfig = field(default_factory=CgConfig)
    seed: int = 0
    variant: str = "standard"
    filter_percentile: float = 0.05
    clamp_max: float = 1e12
    floor_eps: float = 1e-12

    def __post_init__(self):
        if self.iterations < 1 or self.probes < 1:
            raise ValueError("iterations and probes must be >= 1")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if not 0.0 < self.filter_percentile < 1.0:
            raise ValueError("filter_percentile must lie in (0, 1)")


@dataclass(frozen=True)
class PrecisionState:
    """The alpha iterate with its floor/clamp policy.

    floor_eps floors every update denominator (the probe estimate can drive
    mu^2 + s below zero); clamp_max caps alpha so pruned coordinates stay
    finite and every system stays SPD.
    """

    alpha: np.ndarray
    iteration: int = 1
    clamp_max: float = 1e12
    floor_eps: float = 1e-12

    @classmethod
    def initial(cls, dim, clamp_max=1e12, floor_eps=1e-12):
        return cls(np.ones(dim), 1, clamp_max, floor_eps)


@dataclass(frozen=True)
class PosteriorEstimate:
    mu: np.ndarray
    s: np.ndarray
    cg_report: object = None


def e_step(problem, state, cfg, rng, probes=None):
    """One covariance-free E-step: solve A X = [P | Phi^T y], mu = beta x_{K+1}.

    The mean column enters the block unscaled so every column sits at a
    comparable norm: the solver's aggregate stopping rule then serves the
    probe columns as well as the mean.  Scaling by beta afterwards recovers
    the same mu (conjugate gradient iterates are proportional under scaling
    of b), whereas putting beta Phi^T y inside the block lets its norm
    dominate the stopping aggregate and leaves the probe solves orders of
    magnitude less converged, which corrupts the diagonal estimate.

    Returns the posterior mean and the probe-based diagonal estimate from
    the first K columns.  Fresh probes are drawn from rng unless an explicit
    probe matrix is supplied.
    """
    op = problem.op
    if probes is None:
        probes = draw_rademacher(problem.dim, cfg.probes, rng)
    rhs = np.concatenate([probes, op.apply_adjoint(problem.y)[:, None]], axis=1)
    system = SystemMatrix(op, problem.beta, state.alpha)
    pre = make_preconditioner(cfg.cg.theta_policy, op, problem.beta, state.alpha)
    report = cg_mod.solve(system, rhs, pre, cfg.cg)
    mu = problem.beta * report.solution[:, cfg.probes]
    s = estimate_diagonal_rademacher(probes, report.solution[:, : cfg.probes])
    return PosteriorEstimate(mu, s, report)


def m_step(est, state):
    """alpha_j <- 1 / max(mu_j^2 + s_j, floor), clamped."""
    second_moment = est.mu**2 + est.s
    alpha = np.minimum(1.0 / np.maximum(second_moment, state.floor_eps), state.clamp_max)
    return replace(state, alpha=alpha, iteration=state.iteration + 1)


def _rectified_second_moment(mu, s, floor_eps):
    # xi = mu / sqrt(2 s); correction = mu sqrt(s/pi) exp(-xi^2)/erfc(-xi),
    # evaluated as mu sqrt(s/pi) / erfcx(-xi) so both tails stay finite
    s = np.maximum(s, floor_eps)
    xi = mu / np.sqrt(2.0 * s)
    with np.errstate(over="ignore"):
        correction = mu * np.sqrt(s / np.pi) / erfcx(-xi)
    return mu**2 + s + correction


def m_step_nonneg(est, state):
    """Precision update under the rectified (non-negative) prior."""
    second_moment = _rectified_second_moment(est.mu, est.s, state.floor_eps)
    alpha = np.minimum(1.0 / np.maximum(second_moment, state.floor_eps), state.clamp_max)
    return replace(state, alpha=alpha, iteration=state.iteration + 1)


def _iteration_record(t, report, dt):
    return {
        "iteration": t,
        "cg_steps": report.steps_taken,
        "cg_residual": report.final_relative_residual,
        "wall_time": dt,
    }


def run_cofem(problem, cfg):
    """Run T iterations; the precision update is skipped after the last E-step.

    Returns (final PrecisionState, final PosteriorEstimate, per-iteration
    diagnostics).  Probe draws come from a dedicated stream keyed by
    cfg.seed, so data generation never shifts when K or U change.
    """
    rng = substream(cfg.seed, _PROBE_STREAM)
    state = PrecisionState.initial(problem.dim, cfg.clamp_max, cfg.floor_eps)
    update = m_step_nonneg if cfg.variant == "nonneg" else m_step
    diagnostics = []
    est = None
    for t in range(1, cfg.iterations + 1):
        start = time.perf_counter()
        try:
            est = e_step(problem, state, cfg, rng)
        except DivergenceError as err:
            raise DivergenceError(err.step, f"EM iteration {t}") from err
        if t < cfg.iterations:
            state = update(est, state)
        diagnostics.append(_iteration_record(t, est.cg_report, time.perf_counter() - start))
    return state, est, diagnostics


def run_cofem_multitask(problem, cfg, share_probes=False):
    """Shared-alpha loop over L tasks.

    All L (K+1)-column systems are solved in ONE blocked CG call per
    iteration; the shared update divides L by the summed per-task second
    moments.  share_probes=True draws a single probe block per iteration and
    reuses it across tasks (matched-stream comparisons); the default draws
    independent probes per task.
    """
    rng = substream(cfg.seed, _PROBE_STREAM)
    dim = problem.dim
    n_tasks = problem.n_tasks
    state = PrecisionState.initial(dim, cfg.clamp_max, cfg.floor_eps)
    if cfg.variant != "standard":
        raise ValueError("multi-task loop supports the standard variant only")
    diagnostics = []
    estimates = None
    for t in range(1, cfg.iterations + 1):
        start = time.perf_counter()
        if share_probes:
            shared = draw_rademacher(dim, cfg.probes, rng)
            probe_blocks = [shared] * n_tasks
        else:
            probe_blocks = [draw_rademacher(dim, cfg.probes, rng) for _ in range(n_tasks)]
        systems = []
        rhs_blocks = []
        pres = []
        for task, probes in zip(problem.tasks, probe_blocks):
            # mean columns ride unscaled next to the probes, as in e_step
            rhs = np.concatenate([probes, task.op.apply_adjoint(task.y)[:, None]], axis=1)
            systems.append(SystemMatrix(task.op, task.beta, state.alpha))
            pres.append(make_preconditioner(cfg.cg.theta_policy, task.op, task.beta, state.alpha))
            rhs_blocks.append(rhs)
        try:
            report, slices = cg_mod.solve_blocked(systems, rhs_blocks, pres, cfg.cg)
        except DivergenceError as err:
            raise DivergenceError(err.step, f"EM iteration {t}") from err
        estimates = []
        for task, probes, sl in zip(problem.tasks, probe_blocks, slices):
            block = report.solution[:, sl]
            mu = task.beta * block[:, cfg.probes]
            s = estimate_diagonal_rademacher(probes, block[:, : cfg.probes])
            estimates.append(PosteriorEstimate(mu, s, report))
        if t < cfg.iterations:
            # sum fully-formed per-task moments so equal tasks reproduce the
            # single-task update exactly
            total = np.zeros(dim)
            for est in estimates:
                total = total + (est.mu**2 + est.s)
            alpha = np.minimum(
                n_tasks / np.maximum(total, state.floor_eps), state.clamp_max
            )
            state = replace(state, alpha=alpha, iteration=state.iteration + 1)
        diagnostics.append(_iteration_record(t, report, time.perf_counter() - start))
    return state, estimates, diagnostics


@dataclass(frozen=True)
class FilteredModeResult:
    z: np.ndarray
    support: np.ndarray
    empty: bool


def _nonneg_ridge(phi_cols, y, ridge, tol=1e-8, max_iter=1_000_000):
    """Projected gradient for min_{u >= 0} ||y - Phi u||^2 + sum ridge_j u_j^2.

    Stops once the projected-gradient norm, scaled by the strong-convexity
    constant, implies a coefficient error of about tol * max(1, ||u||); a
    plain relative-gradient cut leaves the coefficients short of that on
    ill-conditioned column subsets.
    """
    gram = phi_cols.T @ phi_cols
    target = phi_cols.T @ y
    eigs = np.linalg.eigvalsh(gram)
    step = 1.0 / (2.0 * (eigs[-1] + ridge.max()))
    strong = 2.0 * (max(eigs[0], 0.0) + ridge.min())
    u = np.zeros(phi_cols.shape[1])
    for _ in range(max_iter):
        grad = 2.0 * (gram @ u + ridge * u - target)
        u_next = np.maximum(u - step * grad, 0.0)
        pg = np.linalg.norm(u - u_next) / step
        u = u_next
        if pg <= tol * strong * max(1.0, np.linalg.norm(u)):
            break
    return u


def filtered_mode(problem, state, est, q):
    """Point estimate from the non-negative posterior.

    Keep coordinates whose mass at zero, (1/2) erfc(xi_j), falls below the
    percentile q, then solve the nonnegative ridge least squares restricted
    to those columns and embed back into R^D.  An empty selection returns
    the zero vector with the empty flag set.
    """
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie in (0, 1)")
    s = np.maximum(est.s, state.floor_eps)
    xi = est.mu / np.sqrt(2.0 * s)
    mass_at_zero = 0.5 * erfc(xi)
    support = np.flatnonzero(mass_at_zero < q)
    z = np.zeros(problem.dim)
    if support.size == 0:
        return FilteredModeResult(z, support, True)
    picker = np.zeros((problem.dim, support.size))
    picker[support, np.arange(support.size)] = 1.0
    phi_cols = problem.op.apply(picker)
    ridge = state.alpha[support] / problem.beta
    u = _nonneg_ridge(phi_cols, problem.y, ridge)
    z[support] = u
    return FilteredModeResult(z, support, False)
