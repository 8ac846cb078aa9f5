"""Problem containers shared by the solvers, plus derived RNG streams."""

from dataclasses import dataclass

import numpy as np

from .operators import LinearOperator, ShapeMismatchError


def substream(seed, *key):
    """Deterministic child generator for (seed, key...) without cross-talk.

    Distinct keys yield statistically independent streams, so e.g. probe
    draws never perturb data generation.
    """
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, key)]))


@dataclass(frozen=True)
class SblProblem:
    """Single-task observation model: y = Phi z + noise, noise precision beta."""

    y: np.ndarray
    op: LinearOperator
    beta: float

    def __post_init__(self):
        y = np.array(self.y, dtype=np.float64)
        if y.shape != (self.op.n_rows,):
            raise ShapeMismatchError("observation y", (self.op.n_rows,), y.shape)
        if not np.isfinite(self.beta) or self.beta <= 0:
            raise ValueError(f"beta must be positive and finite, got {self.beta}")
        y.flags.writeable = False
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def dim(self):
        return self.op.n_cols


@dataclass(frozen=True)
class MultiTaskProblem:
    """L tasks sharing the coefficient dimension, noise precision, and alpha."""

    tasks: tuple

    def __post_init__(self):
        tasks = tuple(self.tasks)
        if not tasks:
            raise ValueError("need at least one task")
        dim = tasks[0].dim
        beta = tasks[0].beta
        for t in tasks[1:]:
            if t.dim != dim:
                raise ShapeMismatchError("task dims", (dim,), (t.dim,))
            if t.beta != beta:
                raise ValueError("all tasks must share one beta")
        object.__setattr__(self, "tasks", tasks)

    @property
    def dim(self):
        return self.tasks[0].dim

    @property
    def beta(self):
        return self.tasks[0].beta

    @property
    def n_tasks(self):
        return len(self.tasks)
