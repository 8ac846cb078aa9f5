"""Synthetic sparse-recovery experiments: generation, metrics, sweeps."""

import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import em as em_mod
from .cofem import CofemConfig, filtered_mode, run_cofem
from .operators import build_dense_gaussian, build_exp_convolution, build_undersampled_dct
from .problem import SblProblem, substream


class SpecError(ValueError):
    """Invalid experiment specification; message names the offending field."""


DICTIONARIES = ("dense-gaussian", "dct", "convolution")
DISTRIBUTIONS = ("uniform", "normal", "exponential")
METHODS = ("cofem", "em", "irls")

_DEFAULT_SPARSITY = {"dense-gaussian": 0.06, "dct": 0.12, "convolution": 0.20}
_DEFAULT_DISTRIBUTION = {
    "dense-gaussian": "uniform",
    "dct": "normal",
    "convolution": "exponential",
}
_DEFAULT_RATE = {"dense-gaussian": 4.0, "dct": 3.0}

# rng stream ids per cell: dictionary draw, spike signal, observation noise
_STREAM_DICT, _STREAM_SIGNAL, _STREAM_NOISE = 0, 1, 2


@dataclass(frozen=True)
class ExperimentSpec:
    """One synthetic recovery problem plus the method that solves it.

    N and sparsity can be given directly (N, d) or derived (rate r gives
    N = floor(D/r); factor f gives d = floor(f*D)); unset values fall back
    to the per-dictionary defaults from the experimental protocol.
    """

    dictionary: str
    D: int
    N: int | None = None
    rate: float | None = None
    rho: float = 0.04
    f: float | None = None
    d: int | None = None
    distribution: str | None = None
    noise_sigma: float = 0.01
    seed: int = 0
    method: str = "cofem"
    cofem: CofemConfig = field(default_factory=CofemConfig)
    em_iterations: int = 30

    def validate(self):
        if self.dictionary not in DICTIONARIES:
            raise SpecError(f"dictionary must be one of {DICTIONARIES}, got {self.dictionary!r}")
        if not isinstance(self.D, int) or self.D < 1:
            raise SpecError(f"D must be a positive integer, got {self.D!r}")
        if self.method not in METHODS:
            raise SpecError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.f is not None and self.d is not None:
            raise SpecError("give either f or d, not both")
        if self.N is not None and self.rate is not None:
            raise SpecError("give either N or rate, not both")
        if not 0.0 < self.rho < 1.0:
            raise SpecError(f"rho must lie in (0, 1), got {self.rho}")
        if self.noise_sigma <= 0:
            raise SpecError(f"noise_sigma must be positive, got {self.noise_sigma}")
        n = self.resolved_n()
        if not 1 <= n <= self.D:
            raise SpecError(f"N must lie in [1, D], got N={n}, D={self.D}")
        d = self.resolved_d()
        if not 0 <= d <= self.D:
            raise SpecError(f"d must lie in [0, D], got d={d}, D={self.D}")
        if self.resolved_distribution() not in DISTRIBUTIONS:
            raise SpecError(f"distribution must be one of {DISTRIBUTIONS}")
        if self.method in ("em", "irls") and self.D > em_mod.MATERIALIZE_GUARD:
            raise SpecError(
                f"method={self.method} materializes D x D and is guarded at "
                f"D <= {em_mod.MATERIALIZE_GUARD}, got D={self.D}"
            )
        if self.method == "irls" and self.resolved_n() > em_mod.MATERIALIZE_GUARD:
            raise SpecError(f"method=irls is guarded at N <= {em_mod.MATERIALIZE_GUARD}")
        return self

    def resolved_n(self):
        if self.dictionary == "convolution":
            if self.N is not None and self.N != self.D:
                raise SpecError("convolution dictionaries are square; N must equal D or be omitted")
            return self.D
        if self.N is not None:
            return self.N
        rate = self.rate if self.rate is not None else _DEFAULT_RATE[self.dictionary]
        if rate < 1.0:
            raise SpecError(f"rate must be >= 1, got {rate}")
        return int(self.D // rate)

    def resolved_d(self):
        if self.d is not None:
            return self.d
        f = self.f if self.f is not None else _DEFAULT_SPARSITY[self.dictionary]
        if not 0.0 <= f <= 1.0:
            raise SpecError(f"f must lie in [0, 1], got {f}")
        return int(f * self.D)

    def resolved_distribution(self):
        return self.distribution or _DEFAULT_DISTRIBUTION[self.dictionary]

    def with_param(self, name, value):
        """Copy of the spec with one swept parameter replaced."""
        if name == "D":
            return replace(self, D=int(value))
        if name == "N":
            return replace(self, N=int(value), rate=None)
        if name == "rate":
            return replace(self, rate=float(value), N=None)
        if name == "rho":
            return replace(self, rho=float(value))
        if name == "f":
            return replace(self, f=float(value), d=None)
        if name == "d":
            return replace(self, d=int(value), f=None)
        if name == "noise_sigma":
            return replace(self, noise_sigma=float(value))
        if name in ("T", "iterations"):
            return replace(
                self,
                cofem=replace(self.cofem, iterations=int(value)),
                em_iterations=int(value),
            )
        if name in ("K", "probes"):
            return replace(self, cofem=replace(self.cofem, probes=int(value)))
        if name in ("U", "max_steps"):
            return replace(self, cofem=replace(self.cofem, cg=replace(self.cofem.cg, max_steps=int(value))))
        if name == "tolerance":
            return replace(self, cofem=replace(self.cofem, cg=replace(self.cofem.cg, tolerance=float(value))))
        if name == "preconditioner":
            return replace(self, cofem=replace(self.cofem, cg=replace(self.cofem.cg, theta_policy=value)))
        raise SpecError(
            f"unknown sweep parameter {name!r}; valid: D, N, rate, rho, f, d, "
            "noise_sigma, T, K, U, tolerance, preconditioner"
        )


@dataclass
class ExperimentResult:
    method: str
    dictionary: str
    D: int
    N: int
    d: int
    seed: int
    nrmse: float
    wall_time: dict
    cg_steps: list
    cg_residuals: list
    zhat: list
    ztrue: list
    swept_param: str | None = None
    swept_value: float | None = None
    trial: int | None = None
    error: str | None = None

    def to_dict(self):
        return {
            "method": self.method,
            "dictionary": self.dictionary,
            "D": self.D,
            "N": self.N,
            "d": self.d,
            "seed": self.seed,
            "swept_param": self.swept_param,
            "swept_value": self.swept_value,
            "trial": self.trial,
            "nrmse": self.nrmse,
            "wall_time": dict(self.wall_time),
            "cg_steps": list(self.cg_steps),
            "cg_residuals": list(self.cg_residuals),
            "zhat": list(self.zhat),
            "ztrue": list(self.ztrue),
            "error": self.error,
        }

    @property
    def total_cg_steps(self):
        return int(sum(self.cg_steps))


def gen_signal(dim, n_spikes, dist, rng):
    """Sparse ground truth: n_spikes uniform coordinates, i.i.d. amplitudes."""
    if n_spikes > dim:
        raise ValueError(f"n_spikes must be <= dim, got {n_spikes} > {dim}")
    z = np.zeros(dim)
    if n_spikes == 0:
        return z
    support = rng.choice(dim, size=n_spikes, replace=False)
    if dist == "uniform":
        values = rng.uniform(-2.0, 2.0, size=n_spikes)
    elif dist == "normal":
        values = rng.normal(0.0, np.sqrt(5.0), size=n_spikes)
    elif dist == "exponential":
        values = rng.exponential(1.0 / 1.5, size=n_spikes)
    else:
        raise ValueError(f"unknown spike distribution {dist!r}")
    z[support] = values
    return z


def gen_observation(op, z_true, sigma, rng):
    """y = Phi z* + sigma * standard normal; returns (y, beta = 1/sigma^2)."""
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")
    y = op.apply(z_true) + sigma * rng.standard_normal(op.n_rows)
    beta = np.inf if sigma == 0 else 1.0 / sigma**2
    return y, beta


def nrmse(z_hat, z_true):
    """||zhat - z*|| / ||z*|| as a percentage."""
    z_hat = np.asarray(z_hat, dtype=np.float64)
    z_true = np.asarray(z_true, dtype=np.float64)
    denom = np.linalg.norm(z_true)
    if denom == 0.0:
        raise ValueError("ground truth is identically zero")
    return 100.0 * np.linalg.norm(z_hat - z_true) / denom


def _build_operator(spec, rng):
    n = spec.resolved_n()
    if spec.dictionary == "dense-gaussian":
        return build_dense_gaussian(n, spec.D, rng)
    if spec.dictionary == "dct":
        return build_undersampled_dct(spec.D, n, rng)
    return build_exp_convolution(spec.D, spec.rho)


def build_problem(spec):
    """Draw (dictionary, signal, observation) for spec; returns (problem, z_true)."""
    op = _build_operator(spec, substream(spec.seed, _STREAM_DICT))
    z_true = gen_signal(
        spec.D, spec.resolved_d(), spec.resolved_distribution(), substream(spec.seed, _STREAM_SIGNAL)
    )
    y, beta = gen_observation(op, z_true, spec.noise_sigma, substream(spec.seed, _STREAM_NOISE))
    return SblProblem(y, op, beta), z_true


def run_single(spec):
    """Generate the problem for spec, solve it, and package the metrics."""
    spec.validate()
    t0 = time.perf_counter()
    problem, z_true = build_problem(spec)
    setup_time = time.perf_counter() - t0

    t1 = time.perf_counter()
    cg_steps = []
    cg_residuals = []
    if spec.method == "cofem":
        cfg = replace(spec.cofem, seed=spec.seed)
        state, est, diagnostics = run_cofem(problem, cfg)
        if cfg.variant == "nonneg":
            z_hat = filtered_mode(problem, state, est, cfg.filter_percentile).z
        else:
            z_hat = est.mu
        cg_steps = [rec["cg_steps"] for rec in diagnostics]
        cg_residuals = [rec["cg_residual"] for rec in diagnostics]
    else:
        kind = "exact" if spec.method == "em" else "woodbury"
        _, post, _ = em_mod.run_em(problem, spec.em_iterations, e_step_kind=kind)
        z_hat = post.mu
    solve_time = time.perf_counter() - t1

    return ExperimentResult(
        method=spec.method,
        dictionary=spec.dictionary,
        D=spec.D,
        N=spec.resolved_n(),
        d=spec.resolved_d(),
        seed=spec.seed,
        nrmse=float(nrmse(z_hat, z_true)),
        wall_time={
            "setup": setup_time,
            "solve": solve_time,
            "total": setup_time + solve_time,
        },
        cg_steps=cg_steps,
        cg_residuals=cg_residuals,
        zhat=[float(v) for v in z_hat],
        ztrue=[float(v) for v in z_true],
    )


def _cell_seed(base_seed, value_index, trial):
    seq = np.random.SeedSequence([int(base_seed), int(value_index), int(trial)])
    return int(seq.generate_state(1, np.uint64)[0])


def _run_cell(template, param, value, value_index, trial):
    spec = template.with_param(param, value)
    spec = replace(spec, seed=_cell_seed(template.seed, value_index, trial))
    try:
        result = run_single(spec)
    except Exception as err:  # a failed cell is recorded, not fatal
        result = ExperimentResult(
            method=spec.method,
            dictionary=spec.dictionary,
            D=spec.D,
            N=spec.resolved_n(),
            d=spec.resolved_d(),
            seed=spec.seed,
            nrmse=float("nan"),
            wall_time={"setup": 0.0, "solve": 0.0, "total": 0.0},
            cg_steps=[],
            cg_residuals=[],
            zhat=[],
            ztrue=[],
            error=f"{type(err).__name__}: {err}",
        )
    result.swept_param = param
    result.swept_value = float(value) if not isinstance(value, str) else value
    result.trial = trial
    return result


def run_sweep(template, param, values, trials=25, threads=None):
    """One run per (grid value, trial), plus per-value aggregates.

    Cells are independent; each derives its own seed from (template.seed,
    value index, trial), so results are identical no matter how many worker
    threads execute the grid.
    """
    template.validate()
    if not values:
        raise SpecError("sweep needs at least one value")
    if trials < 1:
        raise SpecError("trials must be >= 1")
    template.with_param(param, values[0])  # reject unknown parameter names up front
    cells = [
        (vi, value, trial)
        for vi, value in enumerate(values)
        for trial in range(trials)
    ]
    workers = threads or os.cpu_count() or 1
    if workers > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(
                pool.map(lambda c: _run_cell(template, param, c[1], c[0], c[2]), cells)
            )
    else:
        results = [_run_cell(template, param, v, vi, tr) for vi, v, tr in cells]

    aggregates = []
    for vi, value in enumerate(values):
        group = results[vi * trials : (vi + 1) * trials]
        good = [r for r in group if r.error is None]
        aggregates.append(
            {
                "swept_param": param,
                "swept_value": float(value) if not isinstance(value, str) else value,
                "trials": len(group),
                "failed": len(group) - len(good),
                "nrmse_mean": float(np.mean([r.nrmse for r in good])) if good else float("nan"),
                "total_cg_steps_mean": float(np.mean([r.total_cg_steps for r in good])) if good else float("nan"),
                "wall_time_mean": float(np.mean([r.wall_time["total"] for r in good])) if good else float("nan"),
            }
        )
    return results, aggregates
