"""Command-line front end: single runs, parameter sweeps, probe diagnostics."""

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace

import numpy as np
import yaml
from scipy.linalg import cho_factor, cho_solve

from . import em as em_mod
from .cg import CgConfig, DivergenceError
from .cofem import CofemConfig, run_cofem
from .probes import active_std_bound, draw_rademacher, estimate_diagonal_rademacher, estimator_std
from .problem import substream
from .simulate import ExperimentSpec, SpecError, build_problem, run_single, run_sweep

# rng stream id for diagnostics Monte-Carlo probe draws (0-3 are taken by
# dictionary/signal/noise/inference probes)
_STREAM_DIAG = 4

CSV_HEADER = [
    "method",
    "D",
    "N",
    "d",
    "swept_value",
    "trial",
    "nrmse",
    "total_cg_steps",
    "wall_time",
]

DIAG_HEADER = ["K", "empirical_max_std", "exact_max_std", "theorem_bound"]


class ConfigError(ValueError):
    """Malformed configuration file; message names the offending key."""


# None marks a leaf; nested dicts are sections checked recursively
_SCHEMA = {
    "method": None,
    "dictionary": {"kind": None, "D": None, "N": None, "rate": None, "rho": None},
    "signal": {"f": None, "d": None, "distribution": None},
    "noise_sigma": None,
    "seed": None,
    "cofem": {
        "iterations": None,
        "probes": None,
        "variant": None,
        "filter_percentile": None,
        "clamp_max": None,
        "floor_eps": None,
        "cg": {
            "max_steps": None,
            "tolerance": None,
            "preconditioner": None,
            "printed_recursion": None,
        },
    },
    "em": {"iterations": None},
    "output": None,
    "format": None,
    "threads": None,
    "sweep": {"parameter": None, "values": None, "trials": None},
    "diag": {"probe_counts": None, "repetitions": None},
}


def _check_keys(data, schema, path=""):
    if not isinstance(data, dict):
        raise ConfigError(f"config section {path.rstrip('.') or '<root>'} must be a mapping")
    for key, value in data.items():
        if key not in schema:
            raise ConfigError(f"unknown config key: {path}{key}")
        sub = schema[key]
        if sub is not None and value is not None:
            _check_keys(value, sub, f"{path}{key}.")


def load_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"cannot parse config {path}: {err}") from err
    data = data or {}
    _check_keys(data, _SCHEMA)
    return data


def _spec_from_config(cfg, seed_override=None):
    dictionary = cfg.get("dictionary") or {}
    if "kind" not in dictionary:
        raise ConfigError("missing config key: dictionary.kind")
    if "D" not in dictionary:
        raise ConfigError("missing config key: dictionary.D")
    signal = cfg.get("signal") or {}
    cofem_cfg = cfg.get("cofem") or {}
    cg_cfg = cofem_cfg.get("cg") or {}
    em_cfg = cfg.get("em") or {}

    cg_kwargs = {}
    if "max_steps" in cg_cfg:
        cg_kwargs["max_steps"] = int(cg_cfg["max_steps"])
    if "tolerance" in cg_cfg:
        cg_kwargs["tolerance"] = float(cg_cfg["tolerance"])
    if "preconditioner" in cg_cfg:
        cg_kwargs["theta_policy"] = cg_cfg["preconditioner"]
    if "printed_recursion" in cg_cfg:
        cg_kwargs["printed_recursion"] = bool(cg_cfg["printed_recursion"])

    cofem_kwargs = {"cg": CgConfig(**cg_kwargs)}
    if "iterations" in cofem_cfg:
        cofem_kwargs["iterations"] = int(cofem_cfg["iterations"])
    if "probes" in cofem_cfg:
        cofem_kwargs["probes"] = int(cofem_cfg["probes"])
    if "variant" in cofem_cfg:
        cofem_kwargs["variant"] = cofem_cfg["variant"]
    if "filter_percentile" in cofem_cfg:
        cofem_kwargs["filter_percentile"] = float(cofem_cfg["filter_percentile"])
    if "clamp_max" in cofem_cfg:
        cofem_kwargs["clamp_max"] = float(cofem_cfg["clamp_max"])
    if "floor_eps" in cofem_cfg:
        cofem_kwargs["floor_eps"] = float(cofem_cfg["floor_eps"])

    seed = seed_override if seed_override is not None else cfg.get("seed", 0)

    spec_kwargs = {
        "dictionary": dictionary["kind"],
        "D": dictionary["D"],
        "seed": int(seed),
        "method": cfg.get("method", "cofem"),
        "cofem": CofemConfig(**cofem_kwargs),
    }
    if dictionary.get("N") is not None:
        spec_kwargs["N"] = int(dictionary["N"])
    if dictionary.get("rate") is not None:
        spec_kwargs["rate"] = float(dictionary["rate"])
    if dictionary.get("rho") is not None:
        spec_kwargs["rho"] = float(dictionary["rho"])
    if signal.get("f") is not None:
        spec_kwargs["f"] = float(signal["f"])
    if signal.get("d") is not None:
        spec_kwargs["d"] = int(signal["d"])
    if signal.get("distribution") is not None:
        spec_kwargs["distribution"] = signal["distribution"]
    if cfg.get("noise_sigma") is not None:
        spec_kwargs["noise_sigma"] = float(cfg["noise_sigma"])
    if "iterations" in em_cfg:
        spec_kwargs["em_iterations"] = int(em_cfg["iterations"])

    return ExperimentSpec(**spec_kwargs).validate()


def _fmt(value):
    """One CSV cell: floats at 17 significant digits, blanks for None."""
    if value is None:
        return ""
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


def _flatten_result(result):
    flat = result.to_dict()
    wall = flat.pop("wall_time")
    flat["wall_time_setup"] = wall["setup"]
    flat["wall_time_solve"] = wall["solve"]
    flat["wall_time_total"] = wall["total"]
    flat["total_cg_steps"] = result.total_cg_steps
    return flat


def _csv_row(result):
    return [
        _fmt(result.method),
        _fmt(result.D),
        _fmt(result.N),
        _fmt(result.d),
        _fmt(result.swept_value),
        _fmt(result.trial),
        _fmt(float(result.nrmse)),
        _fmt(result.total_cg_steps),
        _fmt(float(result.wall_time["total"])),
    ]


def _aggregate_row(template, agg):
    spec = template.with_param(agg["swept_param"], agg["swept_value"])
    try:
        n_resolved, d_resolved = spec.resolved_n(), spec.resolved_d()
    except SpecError:  # a grid value that never validated; leave context blank
        n_resolved = d_resolved = None
    return [
        _fmt(spec.method),
        _fmt(spec.D),
        _fmt(n_resolved),
        _fmt(d_resolved),
        _fmt(agg["swept_value"]),
        "mean",
        _fmt(float(agg["nrmse_mean"])),
        _fmt(float(agg["total_cg_steps_mean"])),
        _fmt(float(agg["wall_time_mean"])),
    ]


def _write_text(path, text):
    if path is None:
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _resolve_threads(args, cfg):
    if getattr(args, "threads", None) is not None:
        return args.threads
    if cfg.get("threads") is not None:
        return int(cfg["threads"])
    env = os.environ.get("SBL_THREADS")
    if env is not None:
        try:
            return int(env)
        except ValueError as err:
            raise ConfigError(f"SBL_THREADS must be an integer, got {env!r}") from err
    return os.cpu_count() or 1


def _resolve_format(args, cfg, default):
    fmt = args.format or cfg.get("format") or default
    if fmt not in ("json", "csv"):
        raise ConfigError(f"format must be json or csv, got {fmt!r}")
    return fmt


def _resolve_output(args, cfg):
    return args.output or cfg.get("output")


def cmd_run(args):
    cfg = load_config(args.config)
    spec = _spec_from_config(cfg, seed_override=args.seed)
    fmt = _resolve_format(args, cfg, default="json")
    output = _resolve_output(args, cfg)

    result = run_single(spec)

    print(f"nrmse: {result.nrmse:.6g} %")
    wall = result.wall_time
    print(
        f"wall_time: {wall['total']:.6g} s "
        f"(setup {wall['setup']:.6g} s, solve {wall['solve']:.6g} s)"
    )
    if output is not None:
        if fmt == "json":
            _write_text(output, json.dumps(_flatten_result(result), indent=2) + "\n")
        else:
            buf = io.StringIO()
            writer = csv.writer(buf)
            writer.writerow(CSV_HEADER)
            writer.writerow(_csv_row(result))
            _write_text(output, buf.getvalue())
        print(f"wrote {output}")
    return 0


def cmd_sweep(args):
    cfg = load_config(args.config)
    sweep_cfg = cfg.get("sweep") or {}
    if "parameter" not in sweep_cfg:
        raise ConfigError("missing config key: sweep.parameter")
    if "values" not in sweep_cfg or not isinstance(sweep_cfg["values"], list):
        raise ConfigError("missing config key: sweep.values (must be a list)")
    trials = int(sweep_cfg.get("trials", 25))
    template = _spec_from_config(cfg, seed_override=args.seed)
    fmt = _resolve_format(args, cfg, default="csv")
    output = _resolve_output(args, cfg)
    threads = _resolve_threads(args, cfg)

    results, aggregates = run_sweep(
        template, sweep_cfg["parameter"], sweep_cfg["values"], trials=trials, threads=threads
    )

    failed = sum(1 for r in results if r.error is not None)
    for r in results:
        if r.error is not None:
            print(f"cell (value={r.swept_value}, trial={r.trial}) failed: {r.error}", file=sys.stderr)

    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(CSV_HEADER)
        for r in results:
            writer.writerow(_csv_row(r))
        for agg in aggregates:
            writer.writerow(_aggregate_row(template, agg))
        _write_text(output, buf.getvalue())
    else:
        payload = {
            "results": [_flatten_result(r) for r in results],
            "aggregates": aggregates,
        }
        _write_text(output, json.dumps(payload, indent=2) + "\n")
    if output is not None:
        print(f"wrote {output} ({len(results)} runs, {len(aggregates)} aggregates, {failed} failed)")
    return 0


def _split_active(alpha, n_rows):
    """Active set at the largest log-gap in sorted alpha.

    The limiting-regime bound assumes the pruned precisions have left for the
    clamp; at finite T they are merely large, so the cleanest split is the
    widest multiplicative gap.  The active size is capped at N, past which
    the active columns cannot be linearly independent.
    """
    order = np.argsort(alpha)
    sorted_alpha = alpha[order]
    limit = min(n_rows, alpha.size - 1)
    ratios = sorted_alpha[1 : limit + 1] / sorted_alpha[:limit]
    split = int(np.argmax(ratios)) + 1
    return np.sort(order[:split])


def _diag_table(spec, probe_counts, repetitions):
    """Per-K spread of the diagonal estimator in the limiting precision state.

    The run's precision vector is converged-then-clamped: coordinates outside
    the detected active set are set to clamp_max, which is the regime the
    limiting bound speaks about.  Returns (rows, active set size).
    """
    problem, _ = build_problem(spec)
    cfg = replace(spec.cofem, seed=spec.seed)
    state, _, _ = run_cofem(problem, cfg)

    active = _split_active(state.alpha, problem.op.n_rows)
    alpha_hat = np.full(spec.D, cfg.clamp_max)
    alpha_hat[active] = state.alpha[active]

    phi = problem.op.materialize()
    a_mat = problem.beta * phi.T @ phi + np.diag(alpha_hat)
    chol = cho_factor(a_mat, lower=True)
    sigma = cho_solve(chol, np.eye(spec.D))
    sigma = 0.5 * (sigma + sigma.T)
    diag = np.diag(sigma).copy()

    rng = substream(spec.seed, _STREAM_DIAG)
    rows = []
    for n_probes in probe_counts:
        sq_err = np.zeros(spec.D)
        for _ in range(repetitions):
            probes = draw_rademacher(spec.D, n_probes, rng)
            estimate = estimate_diagonal_rademacher(probes, sigma @ probes)
            sq_err += (estimate - diag) ** 2
        empirical = float(np.sqrt(sq_err / repetitions).max())
        exact = float(estimator_std(sigma, n_probes).max())
        bound = float(active_std_bound(phi[:, active], problem.beta, n_probes))
        rows.append(
            {
                "K": int(n_probes),
                "empirical_max_std": empirical,
                "exact_max_std": exact,
                "theorem_bound": bound,
            }
        )
    return rows, active.size


def cmd_diag_probes(args):
    cfg = load_config(args.config)
    diag_cfg = cfg.get("diag") or {}
    probe_counts = [int(k) for k in diag_cfg.get("probe_counts", [5, 10, 20, 40])]
    repetitions = int(diag_cfg.get("repetitions", 100))
    if any(k < 1 for k in probe_counts) or repetitions < 1:
        raise ConfigError("diag.probe_counts and diag.repetitions must be positive")
    spec = _spec_from_config(cfg, seed_override=args.seed)
    if spec.method != "cofem":
        raise ConfigError("diag-probes requires method: cofem")
    if spec.D > em_mod.MATERIALIZE_GUARD:
        raise ConfigError(
            f"diag-probes materializes the D x D posterior covariance and is "
            f"guarded at D <= {em_mod.MATERIALIZE_GUARD}, got D={spec.D}"
        )
    fmt = _resolve_format(args, cfg, default="csv")
    output = _resolve_output(args, cfg)

    rows, n_active = _diag_table(spec, probe_counts, repetitions)

    print(
        f"alpha from a T={spec.cofem.iterations} run; {n_active} active coordinates, "
        f"the rest clamped to {spec.cofem.clamp_max:g}"
    )
    print(f"{'K':>6}  {'empirical_max_std':>20}  {'exact_max_std':>20}  {'theorem_bound':>20}")
    for row in rows:
        print(
            f"{row['K']:>6}  {row['empirical_max_std']:>20.6e}  "
            f"{row['exact_max_std']:>20.6e}  {row['theorem_bound']:>20.6e}"
        )

    if output is not None:
        if fmt == "csv":
            buf = io.StringIO()
            writer = csv.writer(buf)
            writer.writerow(DIAG_HEADER)
            for row in rows:
                writer.writerow([_fmt(row[key]) for key in DIAG_HEADER])
            _write_text(output, buf.getvalue())
        else:
            _write_text(output, json.dumps(rows, indent=2) + "\n")
        print(f"wrote {output}")

    violations = [row for row in rows if row["empirical_max_std"] > row["theorem_bound"]]
    if violations:
        ks = [row["K"] for row in violations]
        print(f"empirical std exceeds the theoretical bound at K = {ks}", file=sys.stderr)
        return 2
    return 0


def _add_common(parser):
    parser.add_argument("config", help="path to the YAML configuration file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--output", default=None, help="output file path")
    parser.add_argument("--format", choices=("json", "csv"), default=None, help="output format")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="worker threads for sweeps (falls back to SBL_THREADS, then CPU count)",
    )


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sbl",
        description="Matrix-free sparse Bayesian learning: runs, sweeps, probe diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment and report NRMSE")
    _add_common(p_run)
    p_run.set_defaults(func=cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a parameter grid and emit CSV/JSON rows")
    _add_common(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    p_diag = sub.add_parser(
        "diag-probes",
        help="compare empirical, exact, and bounded probe-estimator spread per K",
    )
    _add_common(p_diag)
    p_diag.set_defaults(func=cmd_diag_probes)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DivergenceError, np.linalg.LinAlgError, ZeroDivisionError, FloatingPointError) as err:
        print(f"numerical error: {err}", file=sys.stderr)
        return 2
    except (ConfigError, SpecError, ValueError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
