"""End-to-end CLI tests on small instance files."""

import csv
import json

import numpy as np
import pytest

from evpricer.mpqp_engine import load_partition
from evpricer.scenario_cli import main

TOY_TRAFFIC = {
    "schema_version": 1,
    "gamma": 1000.0,
    "eps_f": 0.0,
    "nodes": [1, 2],
    "arcs": [{"id": "a0", "tail": 1, "head": 2, "capacity_slope": 10000.0}],
    "stations": [{"node": 1, "grid_bus": 2, "avg_demand": 12.0,
                  "charge_rate": 200.0, "flow_cap": 60.0,
                  "capacity_slope": 10000.0}],
    "od_pairs": [{"origin": 1, "destination": 2, "demand": 100.0,
               "routes": [["a0"]], "policy": "expand"}],
}

TOY_GRID = {
    "schema_version": 1,
    "buses": [{"id": 1}, {"id": 2, "load": 100.0}],
    "lines": [{"from": 1, "to": 2, "r": 0.01, "x": 0.05}],
    "generators": [{"bus": 1, "capacity": 10000.0, "cost": 0.5}],
    "station_buses": [2],
}

OSC_TRAFFIC = {
    "schema_version": 1,
    "gamma": 1000.0,
    "nodes": [1, 2, 3],
    "arcs": [
        {"id": "a1", "tail": 1, "head": 2, "free_flow_time": 0.01,
         "capacity_slope": 10000.0},
        {"id": "a2", "tail": 2, "head": 3, "free_flow_time": 0.01,
         "capacity_slope": 10000.0},
    ],
    "stations": [
        {"node": 1, "grid_bus": 2, "avg_demand": 1.0, "charge_rate": 250.0,
         "flow_cap": 200.0, "capacity_slope": 10000.0},
        {"node": 2, "grid_bus": 3, "avg_demand": 1.0, "charge_rate": 250.0,
         "flow_cap": 200.0, "capacity_slope": 10000.0},
    ],
    "od_pairs": [{"origin": 1, "destination": 3, "demand": 100.0,
               "routes": [["a1", "a2"]], "policy": "charge"}],
}

OSC_GRID = {
    "schema_version": 1,
    "buses": [{"id": 1}, {"id": 2}, {"id": 3}],
    "lines": [
        {"from": 1, "to": 2, "r": 0.01, "x": 0.05, "flow_limit": 50.0},
        {"from": 1, "to": 3, "r": 0.01, "x": 0.05, "flow_limit": 50.0},
    ],
    "generators": [{"bus": 1, "capacity": 10000.0, "cost": 0.1},
                   {"bus": 2, "capacity": 10000.0, "cost": 1.0},
                   {"bus": 3, "capacity": 10000.0, "cost": 1.0}],
    "station_buses": [2, 3],
}


@pytest.fixture
def toy_files(tmp_path):
    traffic = tmp_path / "traffic.json"
    grid = tmp_path / "grid.json"
    traffic.write_text(json.dumps(TOY_TRAFFIC))
    grid.write_text(json.dumps(TOY_GRID))
    return str(traffic), str(grid), tmp_path


def run(args):
    return main([str(a) for a in args])


def read_json(path):
    with open(path) as fh:
        return json.load(fh)


def read_csv(path):
    with open(path) as fh:
        schema = fh.readline()
        assert schema.startswith("# schema=evpricer.")
        return list(csv.DictReader(fh))


# ------------------------------------------------------------------- solve

def test_solve_default_box(toy_files):
    traffic, grid, tmp = toy_files
    out = tmp / "run"
    assert run(["solve", "--traffic", traffic, "--grid", grid, "--out", out]) == 0
    doc = read_json(out / "solve.json")
    assert doc["schema"] == "evpricer.solve/v1"
    # default box [0, 2 max c] = [0, 1] holds a single no-charge region
    assert doc["n_regions"] == 1
    assert doc["lam_c"] == pytest.approx([0.5], abs=1e-8)
    assert doc["d_c"] == pytest.approx([0.0], abs=1e-8)
    assert doc["combined_cost"] == pytest.approx(1050.0, abs=1e-5)
    assert doc["joint_idso_cost"] == pytest.approx(50.0, abs=1e-5)
    assert doc["kkt_pass"] is True
    assert doc["stats"]["n_feasible"] >= 1


def test_solve_wide_box_finds_three_regions(toy_files):
    traffic, grid, tmp = toy_files
    out = tmp / "run"
    assert run(["solve", "--traffic", traffic, "--grid", grid,
                "--out", out, "--lambda-box=-10,2"]) == 0
    doc = read_json(out / "solve.json")
    assert doc["n_regions"] == 3
    assert doc["lam_c"] == pytest.approx([0.5], abs=1e-8)
    assert doc["combined_cost"] == pytest.approx(1050.0, abs=1e-5)


def test_env_overrides_and_flag_precedence(toy_files, monkeypatch):
    traffic, grid, tmp = toy_files
    monkeypatch.setenv("EVPRICER_TRAFFIC", traffic)
    monkeypatch.setenv("EVPRICER_GRID", grid)
    monkeypatch.setenv("EVPRICER_LAMBDA_BOX", "-10,2")
    monkeypatch.setenv("EVPRICER_OUT", str(tmp / "env_out"))
    assert run(["solve", "--out", tmp / "flag_out"]) == 0
    assert not (tmp / "env_out").exists()
    doc = read_json(tmp / "flag_out" / "solve.json")
    assert doc["n_regions"] == 3


# ----------------------------------------------------------------- regions

def test_regions_export_roundtrip(toy_files):
    traffic, grid, tmp = toy_files
    out = tmp / "run"
    assert run(["regions", "--traffic", traffic, "--grid", grid,
                "--out", out, "--lambda-box=-10,2"]) == 0
    pi = load_partition(out / "partition.json")
    assert len(pi.regions) == 3


def test_regions_single_region_box(toy_files):
    traffic, grid, tmp = toy_files
    out = tmp / "run"
    assert run(["regions", "--traffic", traffic, "--grid", grid,
                "--out", out, "--lambda-box=-4,2"]) == 0
    pi = load_partition(out / "partition.json")
    assert len(pi.regions) == 1


# ------------------------------------------------------------------ sweeps

def test_demand_sweep_zero_demand_matches_plain_dispatch(toy_files):
    traffic, grid, tmp = toy_files
    out = tmp / "run"
    assert run(["sweep-demand", "--traffic", traffic, "--grid", grid,
                "--out", out, "--demands", "0,100", "--workers", "2"]) == 0
    rows = read_csv(out / "demand_sweep.csv")
    assert [r["m_w"] for r in rows] == ["0.0", "100.0"]
    zero = rows[0]
    assert zero["status"] == "ok"
    assert int(zero["region_count"]) == 1
    # no traffic: the price setter pays exactly the plain dispatch cost
    assert float(zero["idso_cost"]) == pytest.approx(50.0, abs=1e-6)
    for row in rows:
        assert row["status"] == "ok"
        assert float(row["idso_cost"]) == pytest.approx(
            float(row["joint_idso_cost"]), abs=1e-5)
    bars = read_csv(out / "demand_bars.csv")
    assert len(bars) == 2
    assert {b["station_id"] for b in bars} == {"1"}


def test_cost_sweep_prices_track_generator_cost(toy_files):
    traffic, grid, tmp = toy_files
    out = tmp / "run"
    assert run(["sweep-cost", "--traffic", traffic, "--grid", grid,
                "--out", out, "--generator", "0", "--costs", "0.5,0.25"]) == 0
    prices = read_csv(out / "cost_prices.csv")
    demands = read_csv(out / "cost_demands.csv")
    assert float(prices[0]["price_1"]) == pytest.approx(0.5, abs=1e-8)
    assert float(prices[1]["price_1"]) == pytest.approx(0.25, abs=1e-8)
    for row in demands:
        assert row["status"] == "ok"
        assert float(row["demand_1"]) == pytest.approx(0.0, abs=1e-7)


# ------------------------------------------------------------- forecast MC

def test_forecast_mc_zero_deviation_is_exactly_zero(toy_files):
    traffic, grid, tmp = toy_files
    out = tmp / "run"
    assert run(["forecast-mc", "--traffic", traffic, "--grid", grid,
                "--out", out, "--deviation", "0", "--samples", "3",
                "--seed", "11"]) == 0
    rows = read_csv(out / "forecast_mc.csv")
    assert len(rows) == 3
    for row in rows:
        assert row["status"] == "ok"
        assert float(row["deviation_pct"]) == 0.0
    summary = read_json(out / "forecast_summary.json")
    assert summary["n_failed"] == 0
    assert summary["deviation_pct_max_abs"] == 0.0


def test_forecast_mc_draws_integer_forecasts(toy_files):
    traffic, grid, tmp = toy_files
    out_a, out_b = tmp / "a", tmp / "b"
    args = ["forecast-mc", "--traffic", traffic, "--grid", grid,
            "--deviation", "10", "--samples", "5", "--seed", "7"]
    assert run(args + ["--out", out_a]) == 0
    assert run(args + ["--out", out_b]) == 0
    assert (out_a / "forecast_mc.csv").read_bytes() == \
        (out_b / "forecast_mc.csv").read_bytes()
    for row in read_csv(out_a / "forecast_mc.csv"):
        m = float(row["forecast_demands"])
        assert m == int(m)
        assert 90.0 <= m <= 110.0
        assert row["status"] == "ok"
        assert abs(float(row["deviation_pct"])) < 50.0


# ---------------------------------------------------------------- baseline

def test_baseline_comparison_file(toy_files):
    traffic, grid, tmp = toy_files
    out = tmp / "run"
    assert run(["baseline", "--traffic", traffic, "--grid", grid,
                "--out", out, "--lambda-box=-10,2"]) == 0
    doc = read_json(out / "baseline.json")
    assert doc["schema"] == "evpricer.baseline/v1"
    assert doc["baseline_excess_combined"] >= -1e-6
    assert doc["optimal"]["combined_cost"] == pytest.approx(1050.0, abs=1e-5)
    assert doc["baseline"]["region_id"] is None
    assert doc["joint"]["combined_cost"] == pytest.approx(1050.0, abs=1e-4)
    for key in ("optimal", "baseline"):
        block = doc[key]
        identity = block["idso_cost"] + block["itso_cost"] - float(
            np.dot(block["lam_c"], block["d_c"]))
        assert block["combined_cost"] == pytest.approx(identity, rel=1e-6)


def test_baseline_oscillation_exit_code(tmp_path):
    traffic = tmp_path / "t.json"
    grid = tmp_path / "g.json"
    traffic.write_text(json.dumps(OSC_TRAFFIC))
    grid.write_text(json.dumps(OSC_GRID))
    out = tmp_path / "run"
    assert run(["baseline", "--traffic", traffic, "--grid", grid,
                "--out", out]) == 4
    err = read_json(out / "error.json")
    assert err["error"] == "BaselineOscillationError"
    assert err["exit_code"] == 4
    assert not (out / "baseline.json").exists()


# ------------------------------------------------------------------ verify

def test_verify_passes_and_is_byte_identical(toy_files):
    traffic, grid, tmp = toy_files
    out_a, out_b = tmp / "a", tmp / "b"
    args = ["verify", "--traffic", traffic, "--grid", grid,
            "--lambda-box=-10,2", "--samples", "60", "--seed", "3"]
    assert run(args + ["--out", out_a]) == 0
    assert run(args + ["--out", out_b]) == 0
    assert (out_a / "verify.json").read_bytes() == \
        (out_b / "verify.json").read_bytes()
    doc = read_json(out_a / "verify.json")
    assert doc["passed"] is True
    assert all(doc["checks"].values())
    assert doc["n_regions"] == 3
    assert doc["baseline_status"] == "ok"
    assert doc["jacobian_points"] >= 15


# -------------------------------------------------------------- exit codes

def test_missing_inputs_is_input_error(tmp_path):
    assert run(["solve", "--out", tmp_path]) == 2


def test_unparseable_file_is_input_error(tmp_path):
    traffic = tmp_path / "t.json"
    grid = tmp_path / "g.json"
    traffic.write_text("{not json")
    grid.write_text(json.dumps(TOY_GRID))
    assert run(["solve", "--traffic", traffic, "--grid", grid,
                "--out", tmp_path / "o"]) == 2


def test_unknown_schema_version_is_input_error(tmp_path):
    doc = dict(TOY_TRAFFIC, schema_version=99)
    traffic = tmp_path / "t.json"
    grid = tmp_path / "g.json"
    traffic.write_text(json.dumps(doc))
    grid.write_text(json.dumps(TOY_GRID))
    assert run(["solve", "--traffic", traffic, "--grid", grid,
                "--out", tmp_path / "o"]) == 2


def test_bad_deviation_is_input_error(toy_files):
    traffic, grid, tmp = toy_files
    assert run(["forecast-mc", "--traffic", traffic, "--grid", grid,
                "--out", tmp / "o", "--deviation", "100", "--samples", "2"]) == 2


def test_infeasible_grid_exit_code(toy_files):
    traffic, _, tmp = toy_files
    starved = dict(TOY_GRID)
    starved["generators"] = [{"bus": 1, "capacity": 10.0, "cost": 0.5}]
    grid = tmp / "starved.json"
    grid.write_text(json.dumps(starved))
    out = tmp / "run"
    assert run(["solve", "--traffic", traffic, "--grid", grid,
                "--out", out]) == 3
    err = read_json(out / "error.json")
    assert err["exit_code"] == 3
