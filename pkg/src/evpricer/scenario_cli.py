"""Command-line harness around the pricing pipeline.

Loads a traffic network and a grid case from JSON, runs one of the
experiment suites and writes schema-versioned JSON/CSV artifacts into the
output directory.  Flags can also be supplied through EVPRICER_* variables
(flag wins over variable wins over default).  Exit codes: 0 success,
2 input error, 3 infeasible, 4 solver failure, 5 coverage gap.
"""

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bilevel_solver import (
    BaselineOscillationError,
    baseline_lowest_price,
    solve_bilevel,
    solve_joint,
    verify_kkt_equilibrium,
)
from .grid_model import (
    DistributionCase,
    load_grid_case,
    solve_opf,
)
from .mpqp_engine import (
    AffinePolicy,
    CoverageGapError,
    CriticalRegion,
    DegenerateSeedError,
    PiecewiseAffineDemandFunction,
    RegionLimitError,
    as_lambda_box,
    box_halfspaces,
    continuity_report,
    evaluate,
    explore,
    save_partition,
)
from .qp_core import (
    EmptyPolyhedronError,
    InfeasibleProblemError,
    SolverFailureError,
    UnboundedProblemError,
    chebyshev_center,
)
from .traffic_model import (
    DEFAULT_EPS_F,
    assemble_traffic_qp,
    build_extended_network,
    parse_traffic_spec,
    solve_traffic,
)

ENV_PREFIX = "EVPRICER_"
OUTPUT_SCHEMA = 1

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_INFEASIBLE = 3
EXIT_SOLVER = 4
EXIT_COVERAGE = 5

_INPUT_ERRORS = (ValueError, OSError, KeyError, TypeError)
_SOLVER_ERRORS = (SolverFailureError, UnboundedProblemError, DegenerateSeedError,
                  RegionLimitError, EmptyPolyhedronError, BaselineOscillationError)


# ----------------------------------------------------------------- loading

@dataclass(frozen=True)
class TrafficSource:
    """Parsed traffic file; build() constructs a fresh network each call."""

    base: dict
    stations: tuple
    pairs: tuple
    time_value: float
    eps_f: float

    def build(self, demands=None):
        """Network with optional per-pair demand override (scalar or list)."""
        pairs = self.pairs
        if demands is not None:
            demands = np.broadcast_to(np.asarray(demands, dtype=float),
                                      (len(pairs),))
            pairs = tuple(dataclasses.replace(p, demand=float(m))
                          for p, m in zip(pairs, demands))
        return build_extended_network(self.base, self.stations, pairs,
                                      self.time_value)

    @property
    def demands(self):
        return np.array([p.demand for p in self.pairs], dtype=float)


@dataclass(frozen=True)
class GridSource:
    case: DistributionCase

    def build(self, cost_override=None):
        """Case with one generator's cost replaced by (index, cost)."""
        if cost_override is None:
            return self.case
        idx, cost = cost_override
        gens = list(self.case.generators)
        if not 0 <= idx < len(gens):
            raise ValueError(f"generator index {idx} out of range")
        gens[idx] = dataclasses.replace(gens[idx], cost=float(cost))
        return dataclasses.replace(self.case, generators=tuple(gens))


def load_traffic(path) -> TrafficSource:
    """Parse a traffic network file into a rebuildable source.

    The file follows the parse_traffic_spec schema; an optional top-level
    eps_f carries the route regularization weight alongside the network.
    """
    with open(path) as fh:
        doc = json.load(fh)
    spec = parse_traffic_spec(doc)
    return TrafficSource(base=spec.base, stations=spec.stations,
                         pairs=spec.pairs, time_value=spec.time_value,
                         eps_f=float(doc.get("eps_f", DEFAULT_EPS_F)))


def load_grid(path) -> GridSource:
    """Parse a grid case file (load_grid_case schema)."""
    return GridSource(case=load_grid_case(path))


# ---------------------------------------------------------------- scenario

@dataclass(frozen=True)
class Scenario:
    """One experiment run: inputs, experiment choice and its parameters."""

    command: str
    traffic: TrafficSource
    grid: GridSource
    out: Path
    lambda_bounds: tuple | None
    seed: int
    workers: int
    tol_kkt: float
    tol_active: float
    demands: tuple = ()
    generator: int = 0
    costs: tuple = ()
    truth: float | None = None
    deviation: float = 0.0
    samples: int = 0
    full_resolve: bool = False

    def lambda_box(self, n_stations):
        if self.lambda_bounds is not None:
            return as_lambda_box(self.lambda_bounds, n_stations)
        top = 2.0 * max(g.cost for g in self.grid.case.generators)
        if top <= 0.0:
            top = 1.0
        return as_lambda_box((0.0, top), n_stations)


def _env(name, fallback=None):
    return os.environ.get(ENV_PREFIX + name, fallback)


def _float_list(text):
    values = tuple(float(tok) for tok in str(text).split(",") if tok.strip())
    if not values:
        raise ValueError(f"empty value list {text!r}")
    return values


def _resolve(args, attr, env_name, cast, default):
    value = getattr(args, attr, None)
    if value is None:
        value = _env(env_name)
    if value is None:
        return default
    return cast(value)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evpricer",
        description="Optimal EV charging prices on a coupled traffic/grid model")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--traffic", help="traffic network JSON file")
    common.add_argument("--grid", help="grid case JSON file")
    common.add_argument("--lambda-box", dest="lambda_box",
                        help="price box as lo,hi applied to every station")
    common.add_argument("--seed", help="RNG seed for sampling/draws")
    common.add_argument("--workers", help="parallel worker count")
    common.add_argument("--out", help="output directory (default ./out)")
    common.add_argument("--tol-kkt", dest="tol_kkt",
                        help="KKT residual pass threshold")
    common.add_argument("--tol-active", dest="tol_active",
                        help="region membership tolerance")

    sub.add_parser("solve", parents=[common],
                   help="prices, demands and costs at the bilevel optimum")
    sub.add_parser("regions", parents=[common],
                   help="export the critical-region partition")
    p = sub.add_parser("sweep-demand", parents=[common],
                       help="re-solve across traffic demand levels")
    p.add_argument("--demands", help="comma list of demand levels m_w")
    p = sub.add_parser("sweep-cost", parents=[common],
                       help="re-solve across generation costs")
    p.add_argument("--generator", help="generator index (0-based)")
    p.add_argument("--costs", help="comma list of cost values")
    p = sub.add_parser("forecast-mc", parents=[common],
                       help="price under demand forecasts, cost at the truth")
    p.add_argument("--truth", help="ground-truth demand override (scalar)")
    p.add_argument("--deviation", help="forecast deviation percent in [0, 100)")
    p.add_argument("--samples", help="number of Monte Carlo samples")
    p.add_argument("--full-resolve", action="store_true", default=None,
                   help="benchmark against a full re-solve at the truth "
                        "instead of holding the forecast prices fixed")
    sub.add_parser("baseline", parents=[common],
                   help="compare optimal pricing against lowest-price choice")
    p = sub.add_parser("verify", parents=[common],
                       help="run every consistency oracle on one instance")
    p.add_argument("--samples", help="number of price samples (default 200)")
    return parser


def scenario_from_args(args) -> Scenario:
    traffic_path = args.traffic if args.traffic is not None else _env("TRAFFIC")
    grid_path = args.grid if args.grid is not None else _env("GRID")
    if traffic_path is None or grid_path is None:
        raise ValueError("--traffic and --grid are required (or EVPRICER_TRAFFIC / EVPRICER_GRID)")

    bounds = _resolve(args, "lambda_box", "LAMBDA_BOX", _float_list, None)
    if bounds is not None and len(bounds) != 2:
        raise ValueError("--lambda-box expects exactly lo,hi")

    seed = _resolve(args, "seed", "SEED", int, 0)
    if seed < 0:
        raise ValueError("--seed must be a nonnegative integer")
    workers = _resolve(args, "workers", "WORKERS", int, 1)
    if workers < 1:
        raise ValueError("--workers must be >= 1")

    scenario = Scenario(
        command=args.command,
        traffic=load_traffic(traffic_path),
        grid=load_grid(grid_path),
        out=Path(_resolve(args, "out", "OUT", str, "out")),
        lambda_bounds=bounds,
        seed=seed,
        workers=workers,
        tol_kkt=_resolve(args, "tol_kkt", "TOL_KKT", float, 1e-6),
        tol_active=_resolve(args, "tol_active", "TOL_ACTIVE", float, 1e-9),
        demands=_resolve(args, "demands", "DEMANDS", _float_list, ()),
        generator=_resolve(args, "generator", "GENERATOR", int, 0),
        costs=_resolve(args, "costs", "COSTS", _float_list, ()),
        truth=_resolve(args, "truth", "TRUTH", float, None),
        deviation=_resolve(args, "deviation", "DEVIATION", float, 0.0),
        samples=_resolve(args, "samples", "SAMPLES", int,
                         200 if args.command == "verify" else 0),
        full_resolve=bool(_resolve(args, "full_resolve", "FULL_RESOLVE",
                                   lambda v: v not in (False, "0", "false", ""), False)),
    )

    if scenario.command == "sweep-demand" and not scenario.demands:
        raise ValueError("sweep-demand needs --demands")
    if scenario.command == "sweep-cost" and not scenario.costs:
        raise ValueError("sweep-cost needs --costs")
    if scenario.command == "forecast-mc":
        if not 0.0 <= scenario.deviation < 100.0:
            raise ValueError("--deviation must lie in [0, 100)")
        if scenario.samples < 1:
            raise ValueError("forecast-mc needs --samples >= 1")
    if scenario.command == "verify" and scenario.samples < 1:
        raise ValueError("verify needs --samples >= 1")
    return scenario


# ----------------------------------------------------------------- writers

def _jsonable(value):
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, (np.floating, float)):
        value = float(value)
        return value if np.isfinite(value) else None
    if isinstance(value, (np.integer, np.bool_)):
        return value.item()
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _write_json(path: Path, kind: str, payload: dict) -> None:
    doc = {"schema": f"evpricer.{kind}/v{OUTPUT_SCHEMA}"}
    doc.update(_jsonable(payload))
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"wrote {path}")


def _write_csv(path: Path, kind: str, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# schema=evpricer.{kind}/v{OUTPUT_SCHEMA}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow(["" if v is None else v for v in row])
    print(f"wrote {path}")


def _result_payload(result) -> dict:
    return {
        "lam": result.lam,
        "lam_c": result.lam_c,
        "d_c": result.d_c,
        "region_id": result.region_id,
        "idso_cost": result.idso_cost,
        "itso_cost": result.itso_cost,
        "latency_cost": result.latency_cost,
        "combined_cost": result.combined_cost,
        "operator_total": result.idso_cost + result.itso_cost,
        "stats": result.stats,
    }


# ---------------------------------------------------------------- pipeline

def _zero_demand_partition(cqp, lambda_box) -> PiecewiseAffineDemandFunction:
    """Single whole-box region with zero demand, for empty traffic."""
    rows, rhs = box_halfspaces(lambda_box)
    center, radius = chebyshev_center(rows, rhs)
    n_c = cqp.n_stations
    policy = AffinePolicy(
        lam_base=center.copy(), xi_base=None, f_base=None, psi_base=None,
        phi_base=None, delta_base=None, s_xi=None, s_f=None, s_psi=None,
        s_phi=None, s_delta=None, demand_matrix=np.zeros((n_c, n_c)),
        demand_offset=np.zeros(n_c), condition=1.0)
    region = CriticalRegion(region_id=0, rows=rows, rhs=rhs, fingerprint=(),
                            policy=policy, interior_point=center, radius=radius)
    return PiecewiseAffineDemandFunction(lambda_box=lambda_box, regions=(region,))


def _build_partition(cqp, lambda_box, demands):
    if float(np.sum(demands)) == 0.0:
        return _zero_demand_partition(cqp, lambda_box)
    seed_point = lambda_box.mean(axis=1)
    return explore(cqp, lambda_box, lam_seed=seed_point)


def _charge_demand(cqp, lam_c):
    xi = solve_traffic(cqp, lam_c).xi
    return cqp.J @ xi[cqp.charge_slice]


def _pipeline(scenario: Scenario, net, case):
    """Demand function, bilevel optimum and joint benchmark for one instance."""
    cqp = assemble_traffic_qp(net, eps_f=scenario.traffic.eps_f)
    box = scenario.lambda_box(cqp.n_stations)
    demands = np.array([p.demand for p in net.od_pairs], dtype=float)
    pi = _build_partition(cqp, box, demands)
    result = solve_bilevel(case, pi, cqp, net)
    joint = solve_joint(case, net, eps_f=scenario.traffic.eps_f)
    return cqp, box, pi, result, joint


# ------------------------------------------------------------- subcommands

def run_solve(scenario: Scenario) -> int:
    net = scenario.traffic.build()
    case = scenario.grid.build()
    cqp, box, pi, result, joint = _pipeline(scenario, net, case)
    kkt = verify_kkt_equilibrium(result, case, net, cqp=cqp)
    payload = _result_payload(result)
    payload.update({
        "lambda_box": box,
        "n_regions": len(pi.regions),
        "joint_idso_cost": joint.idso_cost,
        "joint_combined_cost": joint.combined_cost,
        "kkt_residuals": kkt,
        "kkt_pass": max(kkt.values()) <= scenario.tol_kkt,
        "duals": result.duals,
    })
    scenario.out.mkdir(parents=True, exist_ok=True)
    _write_json(scenario.out / "solve.json", "solve", payload)
    return EXIT_OK


def run_regions(scenario: Scenario) -> int:
    net = scenario.traffic.build()
    cqp = assemble_traffic_qp(net, eps_f=scenario.traffic.eps_f)
    box = scenario.lambda_box(cqp.n_stations)
    pi = _build_partition(cqp, box, scenario.traffic.demands)
    scenario.out.mkdir(parents=True, exist_ok=True)
    path = scenario.out / "partition.json"
    save_partition(pi, path)
    print(f"wrote {path} ({len(pi.regions)} regions)")
    return EXIT_OK


def run_demand_sweep(scenario: Scenario) -> int:
    """Table of costs across demand levels, plus per-station demand bars."""
    case = scenario.grid.build()

    def one(m_w):
        start = time.perf_counter()
        try:
            net = scenario.traffic.build(demands=m_w)
            _, _, pi, result, joint = _pipeline(scenario, net, case)
            wall = time.perf_counter() - start
            row = [m_w, result.idso_cost, len(pi.regions), wall,
                   joint.idso_cost, "ok"]
            bars = [[m_w, str(st.station_id), float(d)]
                    for st, d in zip(net.stations, result.d_c)]
            return row, bars
        except (InfeasibleProblemError, CoverageGapError, *_SOLVER_ERRORS) as err:
            wall = time.perf_counter() - start
            return [m_w, None, None, wall, None, type(err).__name__], []

    with ThreadPoolExecutor(max_workers=scenario.workers) as pool:
        outcomes = list(pool.map(one, scenario.demands))

    scenario.out.mkdir(parents=True, exist_ok=True)
    _write_csv(scenario.out / "demand_sweep.csv", "demand_sweep",
               ["m_w", "idso_cost", "region_count", "wall_time_s",
                "joint_idso_cost", "status"],
               [row for row, _ in outcomes])
    _write_csv(scenario.out / "demand_bars.csv", "demand_bars",
               ["m_w", "station_id", "demand_kwh"],
               [bar for _, bars in outcomes for bar in bars])
    return EXIT_OK


def run_cost_sweep(scenario: Scenario) -> int:
    """Station prices and demands as one generator's cost varies.

    The demand function depends only on the traffic side, so the partition
    is explored once and reused across cost values.
    """
    net = scenario.traffic.build()
    cqp = assemble_traffic_qp(net, eps_f=scenario.traffic.eps_f)
    box = scenario.lambda_box(cqp.n_stations)
    pi = _build_partition(cqp, box, scenario.traffic.demands)
    labels = [str(st.station_id) for st in net.stations]

    def one(c):
        try:
            case = scenario.grid.build(cost_override=(scenario.generator, c))
            result = solve_bilevel(case, pi, cqp, net)
            return ([c, *[float(v) for v in result.lam_c], "ok"],
                    [c, *[float(v) for v in result.d_c], "ok"])
        except (InfeasibleProblemError, *_SOLVER_ERRORS) as err:
            blank = [None] * len(labels)
            return [c, *blank, type(err).__name__], [c, *blank, type(err).__name__]

    with ThreadPoolExecutor(max_workers=scenario.workers) as pool:
        outcomes = list(pool.map(one, scenario.costs))

    scenario.out.mkdir(parents=True, exist_ok=True)
    _write_csv(scenario.out / "cost_prices.csv", "cost_prices",
               ["c_value", *[f"price_{s}" for s in labels], "status"],
               [p for p, _ in outcomes])
    _write_csv(scenario.out / "cost_demands.csv", "cost_demands",
               ["c_value", *[f"demand_{s}" for s in labels], "status"],
               [d for _, d in outcomes])
    return EXIT_OK


def _draw_forecasts(truth, deviation, samples, seed):
    """Integer demand forecasts, uniform per pair in truth*(1 +/- dev)."""
    if deviation == 0.0:
        return np.tile(truth, (samples, 1))
    lo = np.ceil(truth * (1.0 - deviation / 100.0)).astype(int)
    hi = np.floor(truth * (1.0 + deviation / 100.0)).astype(int)
    swap = lo > hi
    lo[swap] = hi[swap] = np.rint(truth[swap]).astype(int)
    rng = np.random.default_rng(seed)
    return rng.integers(lo, hi, endpoint=True,
                        size=(samples, truth.shape[0])).astype(float)


def _demand_cost_bound(scenario: Scenario, net, case):
    """Spread of grid cost over the reachable station-demand box, in percent.

    Both the forecast-side and the realized cost are dispatch costs at some
    demand vector between zero and the station caps, so when every cap is
    finite the relative deviation cannot exceed the spread of those two
    extremes (dispatch cost grows with added demand on these radial cases).
    """
    caps = np.array([net.arcs[net.arc_index(st.charge_arc)].flow_cap * st.avg_demand
                     for st in net.stations])
    if not np.all(np.isfinite(caps)):
        return None
    try:
        low = solve_opf(case, np.zeros(len(caps)), check_degeneracy=False).objective
        high = solve_opf(case, caps, check_degeneracy=False).objective
    except (InfeasibleProblemError, *_SOLVER_ERRORS):
        return None
    if low <= 0.0:
        return None
    return 100.0 * (high - low) / low


def run_forecast_mc(scenario: Scenario) -> int:
    """Price under forecast demands, then pay the grid bill at the truth.

    Per sample: solve the bilevel problem on the forecast instance, hold
    its prices fixed, re-solve the routing QP at the true demands and cost
    the dispatch at the induced consumption.  Both sides of the deviation
    are costed through the same routing-then-dispatch path so identical
    forecasts give exactly zero deviation.  --full-resolve benchmarks
    against re-pricing at the truth instead of holding prices fixed.
    """
    case = scenario.grid.build()
    truth = scenario.traffic.demands
    if scenario.truth is not None:
        truth = np.full_like(truth, float(scenario.truth))
    net_true = scenario.traffic.build(demands=truth)
    cqp_true = assemble_traffic_qp(net_true, eps_f=scenario.traffic.eps_f)
    forecasts = _draw_forecasts(truth, scenario.deviation, scenario.samples,
                                scenario.seed)

    def path_cost(cqp, lam_c):
        return solve_opf(case, _charge_demand(cqp, lam_c),
                         check_degeneracy=False).objective

    def realized_cost():
        _, _, _, result, _ = _pipeline(scenario, net_true, case)
        return path_cost(cqp_true, result.lam_c)

    def one(forecast):
        try:
            net_f = scenario.traffic.build(demands=forecast)
            _, _, _, result, _ = _pipeline(scenario, net_f, case)
            cqp_f = assemble_traffic_qp(net_f, eps_f=scenario.traffic.eps_f)
            forecast_cost = path_cost(cqp_f, result.lam_c)
            if scenario.full_resolve:
                real = realized_cost()
            else:
                real = path_cost(cqp_true, result.lam_c)
            denom = abs(forecast_cost) if forecast_cost != 0.0 else 1.0
            dev = 100.0 * (real - forecast_cost) / denom
            return [forecast_cost, real, dev, "ok"]
        except (InfeasibleProblemError, CoverageGapError, *_SOLVER_ERRORS) as err:
            return [None, None, None, type(err).__name__]

    with ThreadPoolExecutor(max_workers=scenario.workers) as pool:
        outcomes = list(pool.map(one, forecasts))

    rows = [[i, ";".join(repr(float(m)) for m in forecast), *outcome]
            for i, (forecast, outcome) in enumerate(zip(forecasts, outcomes))]
    devs = np.array([o[2] for o in outcomes if o[3] == "ok"], dtype=float)
    summary = {
        "truth": truth,
        "deviation_input_pct": scenario.deviation,
        "n_samples": scenario.samples,
        "n_failed": sum(o[3] != "ok" for o in outcomes),
        "seed": scenario.seed,
        "full_resolve": scenario.full_resolve,
        "deviation_bound_pct": _demand_cost_bound(scenario, net_true, case),
    }
    if devs.size:
        summary.update({
            "deviation_pct_max": float(devs.max()),
            "deviation_pct_min": float(devs.min()),
            "deviation_pct_mean": float(devs.mean()),
            "deviation_pct_max_abs": float(np.abs(devs).max()),
        })
    scenario.out.mkdir(parents=True, exist_ok=True)
    _write_csv(scenario.out / "forecast_mc.csv", "forecast_mc",
               ["sample", "forecast_demands", "forecast_idso_cost",
                "realized_idso_cost", "deviation_pct", "status"], rows)
    _write_json(scenario.out / "forecast_summary.json", "forecast_summary",
                summary)
    return EXIT_OK


def run_baseline(scenario: Scenario) -> int:
    """Optimal pricing vs the lowest-price heuristic, joint cost alongside."""
    net = scenario.traffic.build()
    case = scenario.grid.build()
    _, _, pi, result, joint = _pipeline(scenario, net, case)
    base = baseline_lowest_price(case, net, eps_f=scenario.traffic.eps_f)
    payload = {
        "optimal": _result_payload(result),
        "baseline": _result_payload(base),
        "joint": {
            "idso_cost": joint.idso_cost,
            "latency_cost": joint.latency_cost,
            "combined_cost": joint.combined_cost,
            "lam_c": joint.lam_c,
            "d_c": joint.d_c,
        },
        "baseline_excess_combined": base.combined_cost - result.combined_cost,
        "baseline_excess_pct": 100.0 * (base.combined_cost - result.combined_cost)
        / abs(result.combined_cost) if result.combined_cost else None,
    }
    scenario.out.mkdir(parents=True, exist_ok=True)
    _write_json(scenario.out / "baseline.json", "baseline", payload)
    return EXIT_OK


def _interior_probes(region, box, rng, count, margin):
    """Up to count points inside the region, clear of facets and box walls."""
    norms = np.linalg.norm(region.rows, axis=1)
    norms[norms == 0.0] = 1.0
    points = []
    for _ in range(200 * count):
        if len(points) == count:
            break
        lam = rng.uniform(box[:, 0], box[:, 1])
        slack = region.rhs - region.rows @ lam
        if np.all(slack / norms > margin):
            points.append(lam)
    if not points:
        points.append(region.interior_point.copy())
    return points


def _fd_jacobian(cqp, lam, eps):
    n_c = lam.shape[0]
    cols = []
    for k in range(n_c):
        step = np.zeros(n_c)
        step[k] = eps
        d_up = _charge_demand(cqp, lam + step)
        d_dn = _charge_demand(cqp, lam - step)
        cols.append((d_up - d_dn) / (2.0 * eps))
    return np.column_stack(cols)


def run_verify(scenario: Scenario) -> int:
    """All consistency oracles on one instance, written as one JSON report.

    Checks: coverage of the price box, demand function vs fresh QP solves,
    unique region membership off facets, continuity across facets, policy
    Jacobians vs finite differences, bilevel vs joint cost, KKT residuals
    at the optimum and at perturbed prices, baseline dominance, and the
    cost accounting identity.  Output contains no timing, so repeated runs
    are byte-identical.
    """
    net = scenario.traffic.build()
    case = scenario.grid.build()
    cqp, box, pi, result, joint = _pipeline(scenario, net, case)

    rng = np.random.default_rng(scenario.seed)
    samples = rng.uniform(box[:, 0], box[:, 1],
                          size=(scenario.samples, box.shape[0]))

    demand_err = 0.0
    membership_ok = True
    off_facet = 0
    for lam in samples:
        d_pi, _ = evaluate(pi, lam)
        demand_err = max(demand_err, float(np.abs(d_pi - _charge_demand(cqp, lam)).max()))
        owners = sum(reg.contains(lam, tol=scenario.tol_active) for reg in pi.regions)
        clear = min(float(np.min(np.abs(reg.rhs - reg.rows @ lam)
                                 / np.where(np.linalg.norm(reg.rows, axis=1) == 0.0,
                                            1.0, np.linalg.norm(reg.rows, axis=1))))
                    for reg in pi.regions)
        if clear > 1e-6:
            off_facet += 1
            membership_ok = membership_ok and owners == 1

    jumps = continuity_report(pi)
    continuity_err = max((j[-1] for j in jumps), default=0.0)

    jac_err = 0.0
    probed = 0
    for region in pi.regions:
        if region.policy.s_xi is None:
            continue
        for lam in _interior_probes(region, box, rng, count=5, margin=1e-3):
            fd = _fd_jacobian(cqp, lam, eps=1e-5)
            jac_err = max(jac_err, float(np.abs(fd - region.policy.demand_matrix).max()))
            probed += 1

    kkt = verify_kkt_equilibrium(result, case, net, cqp=cqp)
    kkt_perturbed = verify_kkt_equilibrium(result, case, net, cqp=cqp,
                                           price_perturbation=0.01)

    try:
        base = baseline_lowest_price(case, net, eps_f=scenario.traffic.eps_f)
        baseline_excess = base.combined_cost - joint.combined_cost
        baseline_status = "ok"
    except BaselineOscillationError:
        baseline_excess = None
        baseline_status = "oscillation"

    gap = abs(result.idso_cost - joint.idso_cost)
    accounting = abs(result.combined_cost
                     - (result.idso_cost + result.itso_cost
                        - float(result.lam_c @ result.d_c)))
    checks = {
        "demand_function": demand_err <= 1e-6,
        "unique_membership": membership_ok,
        "continuity": continuity_err <= 1e-6,
        "jacobian": jac_err <= 1e-4,
        "oracle_gap": gap <= 1e-5 * (1.0 + abs(joint.idso_cost)),
        "kkt": max(kkt.values()) <= scenario.tol_kkt,
        "kkt_sensitivity": max(kkt_perturbed.values()) >= 1e-3,
        "baseline_dominance": baseline_excess is None or baseline_excess >= -1e-6,
        "accounting": accounting <= 1e-6 * (1.0 + abs(result.combined_cost)),
    }
    payload = {
        "seed": scenario.seed,
        "n_samples": scenario.samples,
        "n_regions": len(pi.regions),
        "demand_max_err": demand_err,
        "off_facet_samples": off_facet,
        "continuity_max_jump": continuity_err,
        "jacobian_max_err": jac_err,
        "jacobian_points": probed,
        "bilevel_idso_cost": result.idso_cost,
        "joint_idso_cost": joint.idso_cost,
        "oracle_gap": gap,
        "kkt_residuals": kkt,
        "kkt_residuals_perturbed": kkt_perturbed,
        "baseline_status": baseline_status,
        "baseline_excess_combined": baseline_excess,
        "accounting_residual": accounting,
        "checks": checks,
        "passed": all(checks.values()),
    }
    scenario.out.mkdir(parents=True, exist_ok=True)
    _write_json(scenario.out / "verify.json", "verify", payload)
    return EXIT_OK


_COMMANDS = {
    "solve": run_solve,
    "regions": run_regions,
    "sweep-demand": run_demand_sweep,
    "sweep-cost": run_cost_sweep,
    "forecast-mc": run_forecast_mc,
    "baseline": run_baseline,
    "verify": run_verify,
}


def _error_record(scenario, code, err) -> None:
    record = {"error": type(err).__name__, "message": str(err), "exit_code": code}
    print(f"error: {record['error']}: {record['message']}", file=sys.stderr)
    out = scenario.out if scenario is not None else None
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            _write_json(out / "error.json", "error", record)
        except OSError:
            pass


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    scenario = None
    try:
        scenario = scenario_from_args(args)
        return _COMMANDS[scenario.command](scenario)
    except _INPUT_ERRORS as err:
        _error_record(scenario, EXIT_INPUT, err)
        return EXIT_INPUT
    except InfeasibleProblemError as err:
        _error_record(scenario, EXIT_INFEASIBLE, err)
        return EXIT_INFEASIBLE
    except CoverageGapError as err:
        _error_record(scenario, EXIT_COVERAGE, err)
        return EXIT_COVERAGE
    except _SOLVER_ERRORS as err:
        _error_record(scenario, EXIT_SOLVER, err)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
