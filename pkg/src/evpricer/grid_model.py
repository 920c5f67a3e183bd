"""Distribution grid model: linearized OPF, nodal prices, and its dual.

Power flow on a line uses the linearization
p_ij = K1_ij (v_i - v_j) + K2_ij (theta_i - theta_j) with
K1 = x r / (r^2 + x^2), K2 = x^2 / (r^2 + x^2).  Every bus carries a
generation variable; buses without a generator get capacity and cost zero,
so vectors g, c, tau are indexed uniformly by bus.  Flow limits are
enforced per direction, which duplicates each line's constraint pair; the
duplication is harmless because only sums and differences of the flow
duals ever enter the dual system.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .qp_core import QpProblem, solve_qp


@dataclass(frozen=True)
class Bus:
    id: object
    load: float = 0.0
    v_min: float = 0.9
    v_max: float = 1.1

    def __post_init__(self):
        if self.v_min >= self.v_max:
            raise ValueError(f"bus {self.id!r}: v_min must be < v_max")
        if self.load < 0:
            raise ValueError(f"bus {self.id!r}: negative load")


@dataclass(frozen=True)
class Line:
    from_bus: object
    to_bus: object
    r: float
    x: float
    flow_limit: float = np.inf

    def __post_init__(self):
        if self.x <= 0:
            # K1 and K2 both vanish at x = 0: the line would carry nothing
            raise ValueError(f"line {self.from_bus!r}-{self.to_bus!r}: reactance must be > 0")
        if self.r < 0 or self.flow_limit < 0:
            raise ValueError(f"line {self.from_bus!r}-{self.to_bus!r}: negative parameter")


@dataclass(frozen=True)
class Generator:
    bus: object
    capacity: float
    cost: float

    def __post_init__(self):
        if self.capacity < 0 or self.cost < 0:
            raise ValueError(f"generator at {self.bus!r}: negative capacity or cost")


@dataclass(frozen=True)
class DistributionCase:
    """Buses, lines, generators and the station-to-bus coupling.

    station_buses lists the buses hosting charging stations in station
    order; it aligns the price slice lambda_c with the traffic model.
    """

    buses: tuple
    lines: tuple
    generators: tuple
    station_buses: tuple = ()

    def __post_init__(self):
        ids = [b.id for b in self.buses]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate bus ids")
        index = {b.id: k for k, b in enumerate(self.buses)}
        object.__setattr__(self, "_bus_index", index)
        gen_buses = set()
        for g in self.generators:
            if g.bus not in index:
                raise ValueError(f"generator on unknown bus {g.bus!r}")
            if g.bus in gen_buses:
                raise ValueError(f"two generators on bus {g.bus!r}")
            gen_buses.add(g.bus)
        for ln in self.lines:
            if ln.from_bus not in index or ln.to_bus not in index:
                raise ValueError("line references an unknown bus")
        for b in self.station_buses:
            if b not in index:
                raise ValueError(f"station on unknown bus {b!r}")
        # connectivity over the undirected line graph
        if self.buses:
            seen = {self.buses[0].id}
            frontier = [self.buses[0].id]
            adj = {b.id: [] for b in self.buses}
            for ln in self.lines:
                adj[ln.from_bus].append(ln.to_bus)
                adj[ln.to_bus].append(ln.from_bus)
            while frontier:
                for nxt in adj[frontier.pop()]:
                    if nxt not in seen:
                        seen.add(nxt)
                        frontier.append(nxt)
            if len(seen) != len(self.buses):
                raise ValueError("grid graph is not connected")

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    def bus_index(self, bus_id) -> int:
        return self._bus_index[bus_id]

    def padded_generation(self) -> tuple:
        """Per-bus (capacity, cost) with zeros on generator-free buses."""
        cap = np.zeros(self.n_bus)
        cost = np.zeros(self.n_bus)
        for g in self.generators:
            k = self.bus_index(g.bus)
            cap[k] = g.capacity
            cost[k] = g.cost
        return cap, cost

    def reference_bus(self) -> int:
        """Index of the angle-reference bus: first bus hosting a generator."""
        gen_buses = {g.bus for g in self.generators}
        for k, b in enumerate(self.buses):
            if b.id in gen_buses:
                return k
        raise ValueError("case has no generator")

    def directed_flow_lines(self) -> list:
        """(tail idx, head idx, line idx) per direction of limited lines."""
        out = []
        for li, ln in enumerate(self.lines):
            if np.isfinite(ln.flow_limit):
                i, j = self.bus_index(ln.from_bus), self.bus_index(ln.to_bus)
                out.append((i, j, li))
                out.append((j, i, li))
        return out

    def station_bus_indices(self) -> list:
        return [self.bus_index(b) for b in self.station_buses]


@dataclass(frozen=True)
class FlowCoefficients:
    k1: np.ndarray  # x r / (r^2 + x^2) per line
    k2: np.ndarray  # x^2 / (r^2 + x^2) per line


@dataclass(frozen=True)
class OpfSolution:
    g: np.ndarray
    v: np.ndarray
    theta: np.ndarray
    lam: np.ndarray
    tau_lo: np.ndarray
    tau_up: np.ndarray
    eta_up: np.ndarray  # per directed limited line
    eta_lo: np.ndarray
    mu_up: np.ndarray
    mu_lo: np.ndarray
    objective: float
    degenerate_prices: bool
    residuals: dict = field(default_factory=dict)


def flow_coefficients(case: DistributionCase) -> FlowCoefficients:
    r = np.array([ln.r for ln in case.lines], dtype=float)
    x = np.array([ln.x for ln in case.lines], dtype=float)
    denom = r ** 2 + x ** 2
    return FlowCoefficients(k1=x * r / denom, k2=x ** 2 / denom)


def full_demand(case: DistributionCase, d_c) -> np.ndarray:
    """Station demand vector scattered onto all buses."""
    d_c = np.atleast_1d(np.asarray(d_c, dtype=float)) if np.size(d_c) else np.zeros(0)
    idx = case.station_bus_indices()
    if d_c.shape[0] != len(idx):
        raise ValueError(f"expected {len(idx)} station demands, got {d_c.shape[0]}")
    d = np.zeros(case.n_bus)
    for k, i in enumerate(idx):
        d[i] += d_c[k]
    return d


@dataclass(frozen=True)
class OpfAssembly:
    """Standard-form LP of the dispatch problem with labeled row blocks.

    Variables x = [g, v, theta].  Equalities: per-bus balance written as
    (flows - g) = -(load + demand), whose duals are the nodal prices, then
    the reference-angle pin.  Inequalities in order: -g <= 0, g <= cap,
    directed flows <= limit, -directed flows <= limit, v <= vmax,
    -v <= -vmin.
    """

    problem: QpProblem
    case: DistributionCase
    n_flow_rows: int


def assemble_opf(case: DistributionCase, d_c) -> OpfAssembly:
    n = case.n_bus
    coeff = flow_coefficients(case)
    cap, cost = case.padded_generation()
    load = np.array([b.load for b in case.buses]) + full_demand(case, d_c)
    v_max = np.array([b.v_max for b in case.buses])
    v_min = np.array([b.v_min for b in case.buses])

    g_sl, v_sl = slice(0, n), slice(n, 2 * n)
    a_eq = np.zeros((n + 1, 3 * n))
    for li, ln in enumerate(case.lines):
        i, j = case.bus_index(ln.from_bus), case.bus_index(ln.to_bus)
        k1, k2 = coeff.k1[li], coeff.k2[li]
        for tail, head in ((i, j), (j, i)):
            a_eq[tail, n + tail] += k1
            a_eq[tail, n + head] -= k1
            a_eq[tail, 2 * n + tail] += k2
            a_eq[tail, 2 * n + head] -= k2
    a_eq[:n, :n] -= np.eye(n)
    a_eq[n, 2 * n + case.reference_bus()] = 1.0
    b_eq = np.concatenate([-load, [0.0]])

    flow_rows = []
    flow_rhs = []
    for i, j, li in case.directed_flow_lines():
        row = np.zeros(3 * n)
        row[n + i] += coeff.k1[li]
        row[n + j] -= coeff.k1[li]
        row[2 * n + i] += coeff.k2[li]
        row[2 * n + j] -= coeff.k2[li]
        flow_rows.append(row)
        flow_rhs.append(case.lines[li].flow_limit)
    flow_rows = np.array(flow_rows).reshape(len(flow_rows), 3 * n)
    flow_rhs = np.array(flow_rhs)

    eye_g = np.zeros((n, 3 * n))
    eye_g[:, g_sl] = np.eye(n)
    eye_v = np.zeros((n, 3 * n))
    eye_v[:, v_sl] = np.eye(n)
    a_in = np.vstack([-eye_g, eye_g, flow_rows, -flow_rows, eye_v, -eye_v])
    b_in = np.concatenate([np.zeros(n), cap, flow_rhs, flow_rhs, v_max, -v_min])

    c = np.concatenate([cost, np.zeros(2 * n)])
    problem = QpProblem(None, c, a_eq=a_eq, b_eq=b_eq, a_in=a_in, b_in=b_in)
    return OpfAssembly(problem=problem, case=case, n_flow_rows=len(flow_rhs))


def _extract(assembly: OpfAssembly, point) -> OpfSolution:
    n = assembly.case.n_bus
    nf = assembly.n_flow_rows
    z = point.in_duals
    ofs = 0
    tau_lo = z[ofs:ofs + n]; ofs += n
    tau_up = z[ofs:ofs + n]; ofs += n
    eta_up = z[ofs:ofs + nf]; ofs += nf
    eta_lo = z[ofs:ofs + nf]; ofs += nf
    mu_up = z[ofs:ofs + n]; ofs += n
    mu_lo = z[ofs:ofs + n]
    return OpfSolution(
        g=point.x[:n], v=point.x[n:2 * n], theta=point.x[2 * n:],
        lam=point.eq_duals[:n], tau_lo=tau_lo, tau_up=tau_up,
        eta_up=eta_up, eta_lo=eta_lo, mu_up=mu_up, mu_lo=mu_lo,
        objective=point.objective, degenerate_prices=False,
        residuals=dict(point.residuals))


def dual_objective_value(case: DistributionCase, sol: OpfSolution, d_c) -> float:
    """Value of the dual objective at the solution's dual block."""
    cap, _ = case.padded_generation()
    v_max = np.array([b.v_max for b in case.buses])
    v_min = np.array([b.v_min for b in case.buses])
    load = np.array([b.load for b in case.buses])
    limits = np.array([case.lines[li].flow_limit for _, _, li in case.directed_flow_lines()])
    val = (-sol.mu_up @ v_max + sol.mu_lo @ v_min - sol.tau_up @ cap
           - limits @ (sol.eta_up + sol.eta_lo) + sol.lam @ load)
    d_c = np.atleast_1d(np.asarray(d_c, dtype=float)) if np.size(d_c) else np.zeros(0)
    if d_c.size:
        val += float(sol.lam[case.station_bus_indices()] @ d_c)
    return float(val)


def solve_opf(case: DistributionCase, d_c, check_degeneracy: bool = True) -> OpfSolution:
    """Dispatch at the given station demands; prices from the balance duals.

    When check_degeneracy is set, the loads are perturbed by signed
    pseudo-random offsets of magnitude ~1e-7 in both directions and the
    degenerate_prices flag records whether any price moved by > 1e-3
    (non-unique nodal prices).
    """
    assembly = assemble_opf(case, d_c)
    point = solve_qp(assembly.problem)
    sol = _extract(assembly, point)

    gap = abs(dual_objective_value(case, sol, d_c) - sol.objective)
    residuals = dict(sol.residuals)
    residuals["duality_gap"] = gap / (1.0 + abs(sol.objective))

    degenerate = False
    if check_degeneracy:
        offsets = 1e-7 * np.random.default_rng(0).uniform(0.5, 1.5, case.n_bus)
        for sign in (1.0, -1.0):
            shifted = DistributionCase(
                buses=tuple(Bus(b.id, max(b.load + sign * offsets[k], 0.0), b.v_min, b.v_max)
                            for k, b in enumerate(case.buses)),
                lines=case.lines, generators=case.generators,
                station_buses=case.station_buses)
            try:
                alt = solve_qp(assemble_opf(shifted, d_c).problem)
            except Exception:
                continue
            if np.abs(alt.eq_duals[:case.n_bus] - sol.lam).max(initial=0.0) > 1e-3:
                degenerate = True
                break

    return OpfSolution(g=sol.g, v=sol.v, theta=sol.theta, lam=sol.lam,
                       tau_lo=sol.tau_lo, tau_up=sol.tau_up, eta_up=sol.eta_up,
                       eta_lo=sol.eta_lo, mu_up=sol.mu_up, mu_lo=sol.mu_lo,
                       objective=sol.objective, degenerate_prices=degenerate,
                       residuals=residuals)


@dataclass(frozen=True)
class DualSystem:
    """Feasible set and objective of the price-setting dual problem.

    Variables u = [tau_up (N), mu_up (N), mu_lo (N), lam (N), eta_up,
    eta_lo (one per directed limited line)]; the lower generation dual is
    eliminated through c - lam + tau_up >= 0.  Equalities are the angle
    and voltage stationarity rows; inequalities are the simplified
    generation row and sign constraints.  The (maximized) objective is
    obj_fixed @ u plus lam restricted to station buses dotted with the
    station demand, which stays symbolic here.
    """

    a_eq: np.ndarray
    b_eq: np.ndarray
    a_in: np.ndarray
    b_in: np.ndarray
    obj_fixed: np.ndarray
    n_bus: int
    n_dir: int
    lam_slice: slice
    station_cols: tuple
    case: DistributionCase

    @property
    def n_vars(self) -> int:
        return self.obj_fixed.shape[0]


def assemble_dual(case: DistributionCase) -> DualSystem:
    """Dual of the dispatch LP with the station-demand term left symbolic."""
    n = case.n_bus
    coeff = flow_coefficients(case)
    directed = case.directed_flow_lines()
    nd = len(directed)
    nv = 4 * n + 2 * nd
    tau_sl = slice(0, n)
    muu_sl = slice(n, 2 * n)
    mul_sl = slice(2 * n, 3 * n)
    lam_sl = slice(3 * n, 4 * n)
    etau_sl = slice(4 * n, 4 * n + nd)
    etal_sl = slice(4 * n + nd, nv)
    # dual column index of the opposite direction of each directed line
    opposite = [k + 1 if k % 2 == 0 else k - 1 for k in range(nd)]

    def stationarity_rows(k_per_line):
        rows = np.zeros((n, nv))
        for li, ln in enumerate(case.lines):
            i, j = case.bus_index(ln.from_bus), case.bus_index(ln.to_bus)
            k = k_per_line[li]
            for tail, head in ((i, j), (j, i)):
                rows[tail, lam_sl.start + tail] += k
                rows[tail, lam_sl.start + head] -= k
        for d, (i, j, li) in enumerate(directed):
            k = k_per_line[li]
            rows[i, etau_sl.start + d] += k
            rows[i, etau_sl.start + opposite[d]] -= k
            rows[i, etal_sl.start + d] -= k
            rows[i, etal_sl.start + opposite[d]] += k
        return rows

    theta_rows = stationarity_rows(coeff.k2)
    v_rows = stationarity_rows(coeff.k1)
    v_rows[:, muu_sl] += np.eye(n)
    v_rows[:, mul_sl] -= np.eye(n)
    a_eq = np.vstack([theta_rows, v_rows])
    b_eq = np.zeros(2 * n)

    cap, cost = case.padded_generation()
    gen_rows = np.zeros((n, nv))
    gen_rows[:, lam_sl] = np.eye(n)
    gen_rows[:, tau_sl] = -np.eye(n)  # lam - tau_up <= cost
    nonneg = np.zeros((nv - n, nv))  # every variable but lam is signed
    keep = [k for k in range(nv) if not (lam_sl.start <= k < lam_sl.stop)]
    for r, k in enumerate(keep):
        nonneg[r, k] = -1.0
    a_in = np.vstack([gen_rows, nonneg])
    b_in = np.concatenate([cost, np.zeros(nv - n)])

    load = np.array([b.load for b in case.buses])
    limits = np.array([case.lines[li].flow_limit for _, _, li in directed])
    obj = np.zeros(nv)
    obj[tau_sl] = -cap
    obj[muu_sl] = -np.array([b.v_max for b in case.buses])
    obj[mul_sl] = np.array([b.v_min for b in case.buses])
    obj[lam_sl] = load
    obj[etau_sl] = -limits
    obj[etal_sl] = -limits

    return DualSystem(a_eq=a_eq, b_eq=b_eq, a_in=a_in, b_in=b_in, obj_fixed=obj,
                      n_bus=n, n_dir=nd, lam_slice=lam_sl,
                      station_cols=tuple(lam_sl.start + i for i in case.station_bus_indices()),
                      case=case)


GRID_SCHEMA_VERSION = 1


def load_grid_case(source) -> DistributionCase:
    """Build a case from a JSON file path or an equivalent dict.

    Schema (version 1): buses [{id, load?, v_min?, v_max?}]; lines
    [{from, to, r, x, flow_limit?}]; generators [{bus, capacity, cost}];
    station_buses [bus ids in station order].
    """
    if isinstance(source, dict):
        data = source
    else:
        with open(source) as fh:
            data = json.load(fh)
    version = data.get("schema_version", GRID_SCHEMA_VERSION)
    if version != GRID_SCHEMA_VERSION:
        raise ValueError(f"unsupported grid schema version {version!r}")
    try:
        buses = tuple(Bus(id=b["id"], load=float(b.get("load", 0.0)),
                          v_min=float(b.get("v_min", 0.9)),
                          v_max=float(b.get("v_max", 1.1)))
                      for b in data["buses"])
        lines = tuple(Line(from_bus=ln["from"], to_bus=ln["to"], r=float(ln["r"]),
                           x=float(ln["x"]),
                           flow_limit=float(ln.get("flow_limit", np.inf)))
                      for ln in data["lines"])
        gens = tuple(Generator(bus=g["bus"], capacity=float(g["capacity"]),
                               cost=float(g["cost"]))
                     for g in data["generators"])
    except KeyError as exc:
        raise ValueError(f"grid file missing field {exc}") from exc
    return DistributionCase(buses=buses, lines=lines, generators=gens,
                            station_buses=tuple(data.get("station_buses", [])))
