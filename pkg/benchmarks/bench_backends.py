"""Compare the numba and numpy kernel backends.

Times the two hot kernels on synthetic workspaces and, end to end, one
matrix-free inference on an undersampled-DCT problem per backend.

    python3 benchmarks/bench_backends.py [--dim 4096] [--cols 21]
                                         [--steps 200] [--repeats 5]
"""

import argparse
import time

import numpy as np

from sbl import kernels
from sbl.cofem import CofemConfig, run_cofem
from sbl.simulate import ExperimentSpec, build_problem


def time_kernels(name, dim, cols, steps, repeats, rng):
    ks = kernels.get_kernels(name)
    best = np.inf
    for _ in range(repeats):
        p = rng.standard_normal((dim, cols))
        psi = rng.standard_normal((dim, cols))
        r = rng.standard_normal((dim, cols))
        x = np.zeros((dim, cols))
        w = np.empty((dim, cols))
        minv = 1.0 / (1.0 + rng.random((dim, 1)))
        groups = np.zeros(cols, dtype=np.int64)
        rho = np.ones(cols)
        pi = np.empty(cols)
        rnorm2 = np.empty(cols)
        # warm-up outside the timed region (JIT compilation on first call)
        ks["step_direction"](r, p, w, minv, groups, rho, True)
        ks["step_solution"](p, psi, r, x, rho, pi, rnorm2)
        start = time.perf_counter()
        for _ in range(steps):
            ks["step_solution"](p, psi, r, x, rho, pi, rnorm2)
            ks["step_direction"](r, p, w, minv, groups, rho, True)
        best = min(best, (time.perf_counter() - start) / steps)
    return best


def time_end_to_end(name, dim, rng_seed):
    kernels.set_backend(name)
    spec = ExperimentSpec(dictionary="dct", D=dim, seed=rng_seed)
    problem, _ = build_problem(spec)
    cfg = CofemConfig(iterations=10, seed=rng_seed)
    run_cofem(problem, cfg)  # warm-up
    start = time.perf_counter()
    run_cofem(problem, cfg)
    return time.perf_counter() - start


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--dim", type=int, default=4096)
    parser.add_argument("--cols", type=int, default=21)
    parser.add_argument("--steps", type=int, default=200)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    backends = ["numpy"]
    if kernels.HAS_NUMBA:
        backends.append("numba")
    else:
        print("numba not importable; benchmarking numpy only")

    rng = np.random.default_rng(0)
    print(f"kernel micro-benchmark: D={args.dim}, Q={args.cols}, best of {args.repeats}")
    micro = {}
    for name in backends:
        micro[name] = time_kernels(name, args.dim, args.cols, args.steps, args.repeats, rng)
        print(f"  {name:>6}: {micro[name] * 1e6:9.1f} us per CG step (kernel portion)")
    if len(micro) == 2:
        print(f"  speedup (numpy/numba): {micro['numpy'] / micro['numba']:.2f}x")

    print(f"end-to-end: DCT D={args.dim}, 10 iterations")
    e2e = {}
    original = kernels.backend_name()
    try:
        for name in backends:
            e2e[name] = time_end_to_end(name, args.dim, rng_seed=0)
            print(f"  {name:>6}: {e2e[name]:7.3f} s")
    finally:
        kernels.set_backend(original)
    if len(e2e) == 2:
        print(f"  speedup (numpy/numba): {e2e['numpy'] / e2e['numba']:.2f}x")


if __name__ == "__main__":
    main()
