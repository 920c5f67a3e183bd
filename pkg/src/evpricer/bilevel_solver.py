"""Optimal station pricing over the critical-region demand function.

On each critical region the station demand is affine in the prices, so
substituting it into the (maximized) dispatch dual turns the price-setting
problem into one convex QP per region: minimize the negated dual objective
    -obj_fixed'u - lam_c' D lam_c - lam_c' d0
over the dual feasible set intersected with the region.  The global
optimum is the best candidate across regions.  Two independent oracles
accompany the solver: a joint dispatch-plus-routing QP that must agree
with the bilevel optimum, and a KKT evaluator that checks the stacked
equilibrium conditions of both levels at a reported solution.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid_model import (
    DistributionCase,
    DualSystem,
    OpfSolution,
    assemble_dual,
    assemble_opf,
    flow_coefficients,
    full_demand,
    solve_opf,
)
from .mpqp_engine import CriticalRegion, PiecewiseAffineDemandFunction
from .qp_core import (
    InfeasibleProblemError,
    QpProblem,
    UnboundedProblemError,
    kkt_residuals,
    solve_qp,
)
from .traffic_model import (
    DEFAULT_EPS_F,
    CompactQP,
    ExtendedTrafficNetwork,
    TrafficSolution,
    assemble_traffic_qp,
    demand_from_flows,
    itso_cost,
    latency_cost,
    solve_traffic,
    traffic_qp_problem,
)

PSD_TOL = 1e-9
GAP_TOL = 1e-6
BASELINE_MAX_ROUNDS = 50
BASELINE_FIXED_POINT_TOL = 1e-6


class BaselineOscillationError(RuntimeError):
    """The lowest-price fixed point alternates instead of converging."""

    def __init__(self, message, last_two):
        super().__init__(message)
        self.last_two = tuple(np.asarray(d, dtype=float) for d in last_two)


@dataclass(frozen=True)
class RegionCandidate:
    """Price-setting optimum restricted to one critical region."""

    region_id: int
    feasible: bool
    objective: float  # minimized negated dual objective
    lam: np.ndarray | None
    lam_c: np.ndarray | None
    duals: dict | None
    convexity_warning: bool


@dataclass(frozen=True)
class BilevelResult:
    """Optimal prices with the induced demands and cost split."""

    lam: np.ndarray
    lam_c: np.ndarray
    d_c: np.ndarray
    region_id: int | None
    idso_cost: float
    itso_cost: float
    latency_cost: float
    combined_cost: float
    duals: dict
    opf: OpfSolution
    traffic: TrafficSolution
    stats: dict


@dataclass(frozen=True)
class JointSolution:
    """Single-program dispatch and routing optimum (the exact oracle)."""

    generation: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    arc_flows: np.ndarray
    route_flows: np.ndarray
    lam: np.ndarray
    lam_c: np.ndarray
    d_c: np.ndarray
    idso_cost: float
    latency_cost: float
    combined_cost: float
    residuals: dict


def _dual_layout(dual: DualSystem):
    n, nd = dual.n_bus, dual.n_dir
    return {
        "tau_up": slice(0, n),
        "mu_up": slice(n, 2 * n),
        "mu_lo": slice(2 * n, 3 * n),
        "lam": dual.lam_slice,
        "eta_up": slice(4 * n, 4 * n + nd),
        "eta_lo": slice(4 * n + nd, 4 * n + 2 * nd),
    }


def _split_duals(dual: DualSystem, u: np.ndarray) -> dict:
    """Named dual blocks, with the eliminated lower generation dual
    reconstructed from tau_lo = c - lam + tau_up."""
    parts = {name: u[sl].copy() for name, sl in _dual_layout(dual).items()}
    _, cost = dual.case.padded_generation()
    parts["tau_lo"] = cost - parts["lam"] + parts["tau_up"]
    return parts


def solve_region(dual: DualSystem, region: CriticalRegion,
                 psd_tol: float = PSD_TOL) -> RegionCandidate:
    """Price-setting QP restricted to one critical region.

    Substitutes the region's affine demand map into the station revenue
    term of the dual objective and minimizes its negation over the dual
    feasible set cut down to R lam_c <= r.  The quadratic block
    -(D + D') is checked for positive semidefiniteness; genuinely
    indefinite demand maps are clipped to their PSD part and flagged.
    """
    d_mat = region.policy.demand_matrix
    d_off = region.policy.demand_offset
    cols = np.asarray(dual.station_cols, dtype=int)
    nv = dual.n_vars

    quad = -(d_mat + d_mat.T)
    eigval, eigvec = np.linalg.eigh(0.5 * (quad + quad.T))
    scale = max(1.0, float(np.abs(eigval).max(initial=0.0)))
    warn = bool(eigval.min(initial=0.0) < -psd_tol * scale)
    clipped = eigvec @ np.diag(np.maximum(eigval, 0.0)) @ eigvec.T
    hess = np.zeros((nv, nv))
    hess[np.ix_(cols, cols)] = 0.5 * (clipped + clipped.T)

    cost = -dual.obj_fixed.copy()
    cost[cols] -= d_off

    region_rows = np.zeros((region.rows.shape[0], nv))
    region_rows[:, cols] = region.rows
    a_in = np.vstack([dual.a_in, region_rows])
    b_in = np.concatenate([dual.b_in, region.rhs])
    problem = QpProblem(hess, cost, a_eq=dual.a_eq, b_eq=dual.b_eq,
                        a_in=a_in, b_in=b_in)
    try:
        point = solve_qp(problem)
    except (InfeasibleProblemError, UnboundedProblemError):
        return RegionCandidate(region_id=region.region_id, feasible=False,
                               objective=np.inf, lam=None, lam_c=None,
                               duals=None, convexity_warning=warn)
    u = point.x
    lam_c = u[cols]
    if (region.rows @ lam_c - region.rhs).max(initial=-np.inf) > 1e-9 * (
            1.0 + np.abs(region.rhs).max(initial=0.0)):
        raise RuntimeError(f"region {region.region_id} candidate escaped its polyhedron")
    # report the exact objective with the raw demand map, not the clipped one
    objective = float(-dual.obj_fixed @ u - lam_c @ (d_mat @ lam_c) - lam_c @ d_off)
    return RegionCandidate(region_id=region.region_id, feasible=True,
                           objective=objective, lam=u[dual.lam_slice].copy(),
                           lam_c=lam_c.copy(), duals=_split_duals(dual, u),
                           convexity_warning=warn)


def solve_bilevel(case: DistributionCase, pi: PiecewiseAffineDemandFunction,
                  cqp: CompactQP, net: ExtendedTrafficNetwork) -> BilevelResult:
    """Globally optimal station prices over the whole demand function.

    Solves the region QP on every critical region and keeps the feasible
    candidate with the smallest objective (ties to the lowest region id),
    then re-solves the routing QP at the winning prices for the traffic
    response and the dispatch LP at the induced demand for generation.

    :raises InfeasibleProblemError: no region admits a feasible dual
    """
    dual = assemble_dual(case)
    candidates = [solve_region(dual, region) for region in pi.regions]
    best = region = None
    for reg, cand in zip(pi.regions, candidates):
        if cand.feasible and (best is None or cand.objective < best.objective):
            best, region = cand, reg
    if best is None:
        raise InfeasibleProblemError("price-setting dual infeasible on every region")

    lam_c = best.lam_c
    d_c = region.policy.demand_at(lam_c)
    traffic = solve_traffic(cqp, lam_c)
    lat = latency_cost(net, traffic.xi)
    itso = itso_cost(net, traffic.xi, lam_c)
    opf = solve_opf(case, d_c, check_degeneracy=False)
    idso = -best.objective
    combined = opf.objective + lat
    stats = {
        "duality_gap": float(abs(opf.objective - idso)),
        "duality_gap_flag": bool(abs(opf.objective - idso) > GAP_TOL * (1.0 + abs(idso))),
        "convexity_warning": any(c.convexity_warning for c in candidates),
        "n_regions": len(pi.regions),
        "n_feasible": sum(c.feasible for c in candidates),
        "objectives": {c.region_id: c.objective for c in candidates if c.feasible},
    }
    return BilevelResult(
        lam=best.lam, lam_c=lam_c, d_c=d_c, region_id=best.region_id,
        idso_cost=idso, itso_cost=itso, latency_cost=lat, combined_cost=combined,
        duals=best.duals, opf=opf, traffic=traffic, stats=stats)


def solve_joint(case: DistributionCase, net: ExtendedTrafficNetwork,
                eps_f: float = DEFAULT_EPS_F) -> JointSolution:
    """Joint dispatch-and-routing QP, the exact benchmark.

    One convex program over (g, v, theta, xi, f) minimizing generation
    cost plus latency cost; the charging payments cancel between the two
    operators.  Station demand enters the balance rows as e_a xi_a, and
    the nodal prices are those rows' duals.

    :raises InfeasibleProblemError: charging demand exceeds grid capability
    """
    cqp = assemble_traffic_qp(net, eps_f=eps_f)
    opf = assemble_opf(case, np.zeros(len(case.station_buses)))
    n = case.n_bus
    n_arcs, n_routes, n_pairs = cqp.dims
    n_grid = 3 * n
    nv = n_grid + n_arcs + n_routes
    xi_ofs = n_grid
    f_ofs = n_grid + n_arcs

    charge_idx = np.arange(cqp.charge_slice.start, cqp.charge_slice.stop)
    station_bus = case.station_bus_indices()
    if len(station_bus) != len(charge_idx):
        raise ValueError("station count mismatch between grid case and network")

    n_eq_grid = opf.problem.a_eq.shape[0]  # balance rows then the angle pin
    a_eq = np.zeros((n_eq_grid + n_pairs + n_arcs, nv))
    a_eq[:n_eq_grid, :n_grid] = opf.problem.a_eq
    for k, bus in enumerate(station_bus):
        a_eq[bus, xi_ofs + charge_idx[k]] = cqp.J[k, k]
    a_eq[n_eq_grid:n_eq_grid + n_pairs, f_ofs:] = cqp.E
    link = slice(n_eq_grid + n_pairs, None)
    a_eq[link, xi_ofs:f_ofs] = -np.eye(n_arcs)
    a_eq[link, f_ofs:] = cqp.A
    b_eq = np.concatenate([opf.problem.b_eq, cqp.m, np.zeros(n_arcs)])

    n_in_grid = opf.problem.a_in.shape[0]
    a_in = np.zeros((n_in_grid + cqp.G.shape[0], nv))
    a_in[:n_in_grid, :n_grid] = opf.problem.a_in
    a_in[n_in_grid:, xi_ofs:f_ofs] = cqp.G
    b_in = np.concatenate([opf.problem.b_in, cqp.h])

    hess = np.zeros((nv, nv))
    hess[xi_ofs:f_ofs, xi_ofs:f_ofs] = cqp.Q
    hess[f_ofs:, f_ofs:] = 2.0 * eps_f * np.eye(n_routes)
    cost = np.zeros(nv)
    cost[:n_grid] = opf.problem.cost
    cost[xi_ofs:f_ofs] = cqp.q_base

    # buses without a generator pin g to a zero-width interval; the pinned
    # columns leave the interior-point problem without a strict interior,
    # so drop them and the bound rows that go vacuous with them
    caps_pad, gen_cost = case.padded_generation()
    keep = np.concatenate([np.flatnonzero(caps_pad > 0.0), np.arange(n, nv)])
    a_eq, a_in = a_eq[:, keep], a_in[:, keep]
    hess = hess[np.ix_(keep, keep)]
    cost = cost[keep]
    live = np.abs(a_in).max(axis=1) > 0.0
    a_in, b_in = a_in[live], b_in[live]

    point = solve_qp(QpProblem(hess, cost, a_eq=a_eq, b_eq=b_eq,
                               a_in=a_in, b_in=b_in))
    x = np.zeros(nv)
    x[keep] = point.x
    g = x[:n]
    xi = x[xi_ofs:f_ofs]
    f = x[f_ofs:]
    lam = point.eq_duals[:n].copy()
    d_c = demand_from_flows(net, xi)
    idso = float(gen_cost @ g)
    lat = latency_cost(net, xi)
    return JointSolution(
        generation=g, v=x[n:2 * n], theta=x[2 * n:n_grid],
        arc_flows=xi, route_flows=f, lam=lam,
        lam_c=lam[station_bus].copy(), d_c=d_c, idso_cost=idso,
        latency_cost=lat, combined_cost=idso + lat,
        residuals=dict(point.residuals))


def _comp_residual(duals: np.ndarray, slacks: np.ndarray) -> float:
    if duals.size == 0:
        return 0.0
    scale = 1.0 + np.abs(duals).max(initial=0.0) * (1.0 + np.abs(slacks).max(initial=0.0))
    return float(np.abs(duals * slacks).max(initial=0.0) / scale)


def verify_kkt_equilibrium(result: BilevelResult, case: DistributionCase,
                           net: ExtendedTrafficNetwork,
                           cqp: CompactQP | None = None,
                           price_perturbation: float = 0.0) -> dict:
    """Scaled residuals of the stacked equilibrium conditions.

    The stored duals are held fixed while the primal sides are re-derived:
    a fresh dispatch solve at the reported demand feeds the upper-level
    complementarity rows, and a fresh routing solve would sit exactly at
    the stored traffic solution when the report is an equilibrium.  A
    nonzero price_perturbation shifts every nodal price and must surface
    in the generation stationarity family, which pairs prices against the
    reconstructed lower generation dual.
    """
    if cqp is None:
        cqp = assemble_traffic_qp(net)
    dual = assemble_dual(case)
    layout = _dual_layout(dual)
    duals = result.duals
    lam = np.asarray(result.lam, dtype=float) + price_perturbation
    lam_c = lam[case.station_bus_indices()]

    u = np.zeros(dual.n_vars)
    for name, sl in layout.items():
        u[sl] = duals[name]
    u[dual.lam_slice] = lam
    stat_rows = dual.a_eq @ u - dual.b_eq
    n = case.n_bus
    row_scale = 1.0 + np.abs(dual.a_eq).max(initial=0.0) * max(1.0, np.abs(u).max(initial=0.0))
    stat_theta = float(np.abs(stat_rows[:n]).max(initial=0.0) / row_scale)
    stat_v = float(np.abs(stat_rows[n:]).max(initial=0.0) / row_scale)

    cap, cost = case.padded_generation()
    gen_row = cost - lam - duals["tau_lo"] + duals["tau_up"]
    stat_g = float(np.abs(gen_row).max(initial=0.0) / (1.0 + np.abs(cost).max(initial=0.0)))

    stacked = np.concatenate([duals[k] for k in
                              ("tau_up", "tau_lo", "mu_up", "mu_lo", "eta_up", "eta_lo")])
    dual_sign = float(max(0.0, -stacked.min(initial=0.0)))

    opf = solve_opf(case, result.d_c, check_degeneracy=False)
    v_max = np.array([b.v_max for b in case.buses])
    v_min = np.array([b.v_min for b in case.buses])
    coeff = flow_coefficients(case)
    flows = []
    for i, j, li in case.directed_flow_lines():
        flows.append(coeff.k1[li] * (opf.v[i] - opf.v[j])
                     + coeff.k2[li] * (opf.theta[i] - opf.theta[j]))
    flows = np.asarray(flows, dtype=float)
    limits = np.array([case.lines[li].flow_limit for _, _, li in case.directed_flow_lines()])
    comp = max(
        _comp_residual(duals["tau_lo"], opf.g),
        _comp_residual(duals["tau_up"], cap - opf.g),
        _comp_residual(duals["mu_up"], v_max - opf.v),
        _comp_residual(duals["mu_lo"], opf.v - v_min),
        _comp_residual(duals["eta_up"], limits - flows),
        _comp_residual(duals["eta_lo"], limits + flows),
    )
    primal = max(opf.residuals.get("eq_feasibility", 0.0),
                 opf.residuals.get("in_feasibility", 0.0))

    lower = traffic_qp_problem(cqp, lam_c)
    t = result.traffic
    x_traffic = np.concatenate([t.xi, t.f])
    y_traffic = np.concatenate([t.psi, t.delta])
    lower_res = kkt_residuals(lower, x_traffic, y_traffic, t.phi)
    lower_level = max(lower_res.values())

    coupling = float(np.abs(result.d_c - cqp.J @ t.xi[cqp.charge_slice]).max(initial=0.0)
                     / (1.0 + np.abs(result.d_c).max(initial=0.0)))
    return {
        "stationarity_theta": stat_theta,
        "stationarity_v": stat_v,
        "stationarity_g": stat_g,
        "dual_sign": dual_sign,
        "complementarity": comp,
        "primal_feasibility": primal,
        "lower_level": float(lower_level),
        "coupling": coupling,
    }


def _station_menu(net: ExtendedTrafficNetwork):
    """Per O-D pair: stations on its routes and whether every route
    charges (the pair has no way to skip charging)."""
    charge_of = {}
    for station in net.stations:
        charge_of[station.charge_arc] = station
    menu = []
    for pair in net.od_pairs:
        stations = []
        must = True
        for route in pair.routes:
            hit = [charge_of[a] for a in route if a in charge_of]
            for st in hit:
                if st.station_id not in [s.station_id for s in stations]:
                    stations.append(st)
            if not hit:
                must = False
        menu.append((pair, stations, must))
    return menu


def baseline_lowest_price(case: DistributionCase, net: ExtendedTrafficNetwork,
                          eps_f: float = DEFAULT_EPS_F) -> BilevelResult:
    """Cost of the naive rule: every charging vehicle picks the cheapest
    reachable station.

    Fixed-point iteration between dispatch and assignment: prices from the
    dispatch at the current demand guess, then each pair that must charge
    fills the cheapest stations on its routes (ties by station id, caps
    shared across pairs), until demand stops moving.  The final traffic
    flows re-solve the routing QP with the charge-arc volumes pinned.
    """
    cqp = assemble_traffic_qp(net, eps_f=eps_f)
    menu = _station_menu(net)
    station_order = {st.station_id: k for k, st in enumerate(net.stations)}
    n_c = len(net.stations)
    flow_caps = np.array([net.arcs[net.arc_index(st.charge_arc)].flow_cap
                          for st in net.stations])

    def assign(lam_c: np.ndarray) -> np.ndarray:
        cap_left = flow_caps.copy()
        flow = np.zeros(n_c)
        for pair, stations, must in menu:
            if not must or not stations:
                continue
            remaining = pair.demand
            ranked = sorted(stations,
                            key=lambda st: (lam_c[station_order[st.station_id]],
                                            st.station_id))
            for st in ranked:
                k = station_order[st.station_id]
                take = min(remaining, cap_left[k])
                flow[k] += take
                cap_left[k] -= take
                remaining -= take
                if remaining <= 0:
                    break
        return flow

    flow = np.zeros(n_c)
    history = [flow]
    demand = np.array([st.avg_demand for st in net.stations]) * flow
    lam_c = None
    for _ in range(BASELINE_MAX_ROUNDS):
        opf = solve_opf(case, demand, check_degeneracy=False)
        lam_c = opf.lam[case.station_bus_indices()]
        new_flow = assign(lam_c)
        history.append(new_flow)
        if np.abs(new_flow - flow).max(initial=0.0) < BASELINE_FIXED_POINT_TOL:
            flow = new_flow
            break
        if len(history) >= 3 and np.abs(new_flow - history[-3]).max(initial=0.0) < 1e-9:
            raise BaselineOscillationError(
                "lowest-price assignment oscillates between two demand patterns",
                last_two=(history[-2], history[-1]))
        flow = new_flow
        demand = np.array([st.avg_demand for st in net.stations]) * flow
    else:
        raise BaselineOscillationError(
            "lowest-price assignment did not converge",
            last_two=(history[-2], history[-1]))

    demand = np.array([st.avg_demand for st in net.stations]) * flow
    opf = solve_opf(case, demand, check_degeneracy=False)
    lam_c = opf.lam[case.station_bus_indices()]

    # traffic response with the assigned charge volumes pinned
    problem = traffic_qp_problem(cqp, lam_c)
    pin = np.zeros((n_c, problem.n))
    charge_idx = np.arange(cqp.charge_slice.start, cqp.charge_slice.stop)
    pin[np.arange(n_c), charge_idx] = 1.0
    pinned = QpProblem(problem.hessian, problem.cost,
                       a_eq=np.vstack([problem.a_eq, pin]),
                       b_eq=np.concatenate([problem.b_eq, flow]),
                       a_in=problem.a_in, b_in=problem.b_in)
    point = solve_qp(pinned)
    n_arcs = cqp.dims[0]
    xi = point.x[:n_arcs]
    f = point.x[n_arcs:]
    traffic = TrafficSolution(
        xi=xi, f=f, psi=point.eq_duals[:cqp.dims[2]],
        phi=point.in_duals.copy(),
        delta=point.eq_duals[cqp.dims[2]:cqp.dims[2] + n_arcs],
        objective=point.objective, active=point.active)
    lat = latency_cost(net, xi)
    duals = {
        "tau_up": opf.tau_up, "tau_lo": opf.tau_lo, "mu_up": opf.mu_up,
        "mu_lo": opf.mu_lo, "lam": opf.lam, "eta_up": opf.eta_up,
        "eta_lo": opf.eta_lo,
    }
    return BilevelResult(
        lam=opf.lam, lam_c=lam_c, d_c=demand, region_id=None,
        idso_cost=opf.objective, itso_cost=lat + float(lam_c @ demand),
        latency_cost=lat, combined_cost=opf.objective + lat,
        duals=duals, opf=opf, traffic=traffic,
        stats={"rounds": len(history) - 1, "assigned_flow": flow.tolist()})
