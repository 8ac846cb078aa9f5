"""Command-line contract: config validation, exit codes, serialized output."""

import csv
import json
import math

import numpy as np
import pytest
import yaml

import sbl.cli as cli
from sbl.cg import DivergenceError
from sbl.cofem import CofemConfig
from sbl.simulate import ExperimentSpec, run_single


def write_config(tmp_path, data, name="config.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data))
    return str(path)


def minimal_dct_config(**overrides):
    cfg = {
        "method": "cofem",
        "dictionary": {"kind": "dct", "D": 256, "N": 85},
        "signal": {"f": 0.12},
        "cofem": {
            "iterations": 30,
            "probes": 20,
            "cg": {"max_steps": 400, "tolerance": 1e-4},
        },
        "seed": 1,
    }
    cfg.update(overrides)
    return cfg


def small_config(**overrides):
    cfg = {
        "dictionary": {"kind": "dct", "D": 64},
        "cofem": {"iterations": 5},
        "seed": 3,
    }
    cfg.update(overrides)
    return cfg


# ---------------------------------------------------------------------------
# run


def test_run_minimal_dct(tmp_path, capsys):
    out = tmp_path / "result.json"
    path = write_config(tmp_path, minimal_dct_config(output=str(out)))
    assert cli.main(["run", path]) == 0
    captured = capsys.readouterr()
    assert "nrmse:" in captured.out
    assert "wall_time:" in captured.out
    payload = json.loads(out.read_text())
    assert payload["nrmse"] < 2.0
    assert payload["method"] == "cofem"
    assert payload["D"] == 256 and payload["N"] == 85


def test_run_json_round_trips_exactly(tmp_path):
    out = tmp_path / "result.json"
    path = write_config(tmp_path, small_config(output=str(out)))
    assert cli.main(["run", path]) == 0
    payload = json.loads(out.read_text())

    spec = ExperimentSpec(dictionary="dct", D=64, seed=3, cofem=CofemConfig(iterations=5))
    expected = run_single(spec)
    assert payload["nrmse"] == expected.nrmse
    assert payload["zhat"] == expected.zhat
    assert payload["ztrue"] == expected.ztrue
    assert payload["cg_steps"] == expected.cg_steps
    assert payload["seed"] == 3


def test_run_csv_round_trips_exactly(tmp_path):
    out = tmp_path / "result.csv"
    path = write_config(tmp_path, small_config(output=str(out), format="csv"))
    assert cli.main(["run", path]) == 0
    rows = list(csv.reader(out.read_text().splitlines()))
    assert rows[0] == cli.CSV_HEADER
    assert len(rows) == 2
    record = dict(zip(rows[0], rows[1]))

    expected = run_single(
        ExperimentSpec(dictionary="dct", D=64, seed=3, cofem=CofemConfig(iterations=5))
    )
    # 17 significant digits reproduce the binary float exactly
    assert float(record["nrmse"]) == expected.nrmse
    assert int(record["total_cg_steps"]) == expected.total_cg_steps
    assert record["swept_value"] == "" and record["trial"] == ""


def test_run_seed_override(tmp_path):
    out = tmp_path / "result.json"
    path = write_config(tmp_path, small_config(output=str(out)))
    assert cli.main(["run", path, "--seed", "7"]) == 0
    assert json.loads(out.read_text())["seed"] == 7


def test_run_rejects_zero_dimension(tmp_path, capsys):
    path = write_config(tmp_path, small_config(dictionary={"kind": "dct", "D": 0}))
    assert cli.main(["run", path]) == 1
    err = capsys.readouterr().err
    assert "config error" in err and "D" in err


def test_run_rejects_oversized_dense_baseline(tmp_path, capsys):
    path = write_config(
        tmp_path, small_config(method="em", dictionary={"kind": "dct", "D": 8192})
    )
    assert cli.main(["run", path]) == 1
    assert "4096" in capsys.readouterr().err


def test_run_rejects_unknown_key(tmp_path, capsys):
    cfg = small_config()
    cfg["dictionary"]["Q"] = 1
    path = write_config(tmp_path, cfg)
    assert cli.main(["run", path]) == 1
    assert "unknown config key: dictionary.Q" in capsys.readouterr().err


def test_run_rejects_unreadable_config(tmp_path, capsys):
    assert cli.main(["run", str(tmp_path / "missing.yaml")]) == 1
    assert "config error" in capsys.readouterr().err


def test_run_rejects_malformed_yaml(tmp_path, capsys):
    path = tmp_path / "broken.yaml"
    path.write_text("dictionary: [unclosed\n")
    assert cli.main(["run", str(path)]) == 1
    assert "config error" in capsys.readouterr().err


def test_run_numerical_failure_exits_two(tmp_path, capsys, monkeypatch):
    def explode(spec):
        raise DivergenceError(3, "EM iteration 1")

    monkeypatch.setattr(cli, "run_single", explode)
    path = write_config(tmp_path, small_config())
    assert cli.main(["run", path]) == 2
    assert "numerical error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# sweep


def sweep_config(**overrides):
    cfg = small_config(sweep={"parameter": "f", "values": [0.12], "trials": 1})
    cfg.update(overrides)
    return cfg


def test_sweep_single_cell_emits_two_rows(tmp_path):
    out = tmp_path / "sweep.csv"
    path = write_config(tmp_path, sweep_config(output=str(out)))
    assert cli.main(["sweep", path]) == 0
    rows = list(csv.reader(out.read_text().splitlines()))
    assert rows[0] == cli.CSV_HEADER
    assert len(rows) == 3  # header + detail + aggregate
    detail, aggregate = rows[1], rows[2]
    assert detail[rows[0].index("trial")] == "0"
    assert aggregate[rows[0].index("trial")] == "mean"
    # the aggregate of one trial is that trial's value
    assert float(detail[rows[0].index("nrmse")]) == float(aggregate[rows[0].index("nrmse")])


def test_sweep_defaults_to_stdout(tmp_path, capsys):
    path = write_config(tmp_path, sweep_config())
    assert cli.main(["sweep", path]) == 0
    out = capsys.readouterr().out
    assert out.startswith(",".join(cli.CSV_HEADER))


def test_sweep_json_payload(tmp_path):
    out = tmp_path / "sweep.json"
    cfg = sweep_config(output=str(out), format="json")
    cfg["sweep"] = {"parameter": "f", "values": [0.06, 0.12], "trials": 2}
    path = write_config(tmp_path, cfg)
    assert cli.main(["sweep", path]) == 0
    payload = json.loads(out.read_text())
    assert len(payload["results"]) == 4
    assert len(payload["aggregates"]) == 2
    group = [r["nrmse"] for r in payload["results"] if r["swept_value"] == 0.06]
    assert payload["aggregates"][0]["nrmse_mean"] == pytest.approx(np.mean(group), rel=1e-15)


def test_sweep_reports_failed_cells(tmp_path, capsys):
    cfg = sweep_config()
    cfg["sweep"] = {"parameter": "d", "values": [4, 100], "trials": 1}
    path = write_config(tmp_path, cfg)
    assert cli.main(["sweep", path]) == 0
    captured = capsys.readouterr()
    assert "failed" in captured.err
    rows = list(csv.reader(captured.out.splitlines()))
    nrmse_col = rows[0].index("nrmse")
    assert math.isnan(float(rows[2][nrmse_col]))


def test_sweep_requires_sweep_block(tmp_path, capsys):
    path = write_config(tmp_path, small_config())
    assert cli.main(["sweep", path]) == 1
    assert "sweep.parameter" in capsys.readouterr().err


def test_sweep_env_thread_fallback(tmp_path, monkeypatch):
    def drop_wall_time(text):
        rows = list(csv.reader(text.splitlines()))
        skip = rows[0].index("wall_time")
        return [[cell for i, cell in enumerate(row) if i != skip] for row in rows]

    monkeypatch.setenv("SBL_THREADS", "2")
    out = tmp_path / "sweep.csv"
    path = write_config(tmp_path, sweep_config(output=str(out)))
    assert cli.main(["sweep", path]) == 0
    parallel = drop_wall_time(out.read_text())

    monkeypatch.setenv("SBL_THREADS", "1")
    assert cli.main(["sweep", path]) == 0
    assert drop_wall_time(out.read_text()) == parallel


def test_sweep_rejects_bad_env_threads(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("SBL_THREADS", "many")
    path = write_config(tmp_path, sweep_config())
    assert cli.main(["sweep", path]) == 1
    assert "SBL_THREADS" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# diag-probes


def test_diag_probes_diagonal_covariance(tmp_path, capsys):
    # Full sampling makes the posterior covariance exactly diagonal, so the
    # probe estimator has zero spread at every K.
    out = tmp_path / "diag.csv"
    cfg = {
        "dictionary": {"kind": "dct", "D": 64, "N": 64},
        "cofem": {"iterations": 20},
        "seed": 2,
        "diag": {"probe_counts": [4, 8], "repetitions": 50},
        "output": str(out),
    }
    path = write_config(tmp_path, cfg)
    assert cli.main(["diag-probes", path]) == 0
    rows = list(csv.reader(out.read_text().splitlines()))
    assert rows[0] == cli.DIAG_HEADER
    empirical = [float(r[1]) for r in rows[1:]]
    assert all(e <= 1e-12 for e in empirical)


def test_diag_probes_bound_dominates_and_scales(tmp_path, capsys):
    cfg = {
        "dictionary": {"kind": "dct", "D": 256},
        "cofem": {"iterations": 50},
        "seed": 1,
        "diag": {"probe_counts": [5, 10, 20, 40], "repetitions": 400},
    }
    path = write_config(tmp_path, cfg)
    assert cli.main(["diag-probes", path]) == 0
    table = capsys.readouterr().out
    data_lines = [ln.split() for ln in table.splitlines() if ln.strip() and ln.strip()[0].isdigit()]
    assert len(data_lines) == 4
    empirical = [float(parts[1]) for parts in data_lines]
    bounds = [float(parts[3]) for parts in data_lines]
    assert all(np.isfinite(b) for b in bounds)
    assert all(e <= b for e, b in zip(empirical, bounds))
    for low, high in zip(empirical[1:], empirical[:-1]):
        ratio = low / high
        assert ratio == pytest.approx(1.0 / math.sqrt(2.0), rel=0.15)


def test_diag_probes_violation_exits_two(tmp_path, capsys, monkeypatch):
    monkeypatch.setattr(cli, "active_std_bound", lambda *args: 0.0)
    cfg = {
        "dictionary": {"kind": "dct", "D": 64},
        "cofem": {"iterations": 10},
        "seed": 2,
        "diag": {"probe_counts": [4], "repetitions": 10},
    }
    path = write_config(tmp_path, cfg)
    assert cli.main(["diag-probes", path]) == 2
    assert "exceeds" in capsys.readouterr().err


def test_diag_probes_requires_cofem_and_small_d(tmp_path, capsys):
    path = write_config(tmp_path, small_config(method="em"))
    assert cli.main(["diag-probes", path]) == 1
    assert "cofem" in capsys.readouterr().err

    path = write_config(tmp_path, small_config(dictionary={"kind": "dct", "D": 8192}))
    assert cli.main(["diag-probes", path]) == 1
    assert "4096" in capsys.readouterr().err
