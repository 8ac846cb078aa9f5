"""Matrix-free sparse Bayesian learning with a blocked preconditioned CG core."""

from .cg import (
    CgConfig,
    CgReport,
    DivergenceError,
    Preconditioner,
    make_preconditioner,
    solve,
    solve_blocked,
)
from .cofem import (
    CofemConfig,
    FilteredModeResult,
    PosteriorEstimate,
    PrecisionState,
    e_step,
    filtered_mode,
    m_step,
    m_step_nonneg,
    run_cofem,
    run_cofem_multitask,
)
from .em import (
    DensePosterior,
    exact_e_step,
    log_marginal_likelihood,
    run_em,
    woodbury_e_step,
)
from .kernels import backend_name, get_kernels, set_backend
from .operators import (
    ConvolutionOperator,
    DenseOperator,
    LinearOperator,
    ShapeMismatchError,
    SubsampledDctOperator,
    SystemMatrix,
    build_dense_gaussian,
    build_exp_convolution,
    build_undersampled_dct,
)
from .probes import (
    active_std_bound,
    draw_rademacher,
    estimate_diagonal_general,
    estimate_diagonal_rademacher,
    estimator_std,
)
from .problem import MultiTaskProblem, SblProblem, substream
from .simulate import (
    ExperimentResult,
    ExperimentSpec,
    SpecError,
    build_problem,
    gen_observation,
    gen_signal,
    nrmse,
    run_single,
    run_sweep,
)

__version__ = "0.1.0"

__all__ = [
    "CgConfig",
    "CgReport",
    "CofemConfig",
    "ConvolutionOperator",
    "DenseOperator",
    "DensePosterior",
    "DivergenceError",
    "ExperimentResult",
    "ExperimentSpec",
    "FilteredModeResult",
    "LinearOperator",
    "MultiTaskProblem",
    "PosteriorEstimate",
    "Preconditioner",
    "PrecisionState",
    "SblProblem",
    "ShapeMismatchError",
    "SpecError",
    "SubsampledDctOperator",
    "SystemMatrix",
    "active_std_bound",
    "backend_name",
    "build_dense_gaussian",
    "build_exp_convolution",
    "build_problem",
    "build_undersampled_dct",
    "draw_rademacher",
    "e_step",
    "estimate_diagonal_general",
    "estimate_diagonal_rademacher",
    "estimator_std",
    "exact_e_step",
    "filtered_mode",
    "gen_observation",
    "gen_signal",
    "get_kernels",
    "log_marginal_likelihood",
    "m_step",
    "m_step_nonneg",
    "make_preconditioner",
    "nrmse",
    "run_cofem",
    "run_cofem_multitask",
    "run_em",
    "run_single",
    "run_sweep",
    "set_backend",
    "solve",
    "solve_blocked",
    "substream",
    "woodbury_e_step",
    "__version__",
]
