"""Traffic network model: extended graph with charging choices and its QP.

A charging station at node v is modeled by an auxiliary node spliced into
the graph: every arc leaving v is re-homed to leave the auxiliary node
instead, and two parallel virtual arcs from v to it are added, a metered
charging arc and a free bypass arc.  A driver passing v therefore takes
exactly one of the two; trips ending at v touch neither.

The assignment problem over route flows f and arc flows xi is a convex QP
whose linear cost carries the station prices.  All assembled matrices use
the arc ordering [physical | no_charge | charge].
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace

import numpy as np

from .qp_core import QpProblem, SolverFailureError, solve_qp

ARC_KINDS = ("physical", "no_charge", "charge")
ROUTE_POLICIES = ("expand", "charge", "bypass", "explicit")
DEFAULT_EPS_F = 1e-8


@dataclass(frozen=True)
class Arc:
    """Directed arc with linear congestion delay.

    Delay is free_flow_time + flow/capacity_slope on physical and charge
    arcs and identically zero on no_charge (bypass) arcs.  flow_cap may be
    inf; finite caps become rows of the QP's upper bound.
    """

    id: object
    tail: object
    head: object
    free_flow_time: float = 0.0
    capacity_slope: float | None = None
    flow_cap: float = np.inf
    kind: str = "physical"

    def __post_init__(self):
        if self.kind not in ARC_KINDS:
            raise ValueError(f"arc {self.id!r}: unknown kind {self.kind!r}")
        if self.tail == self.head:
            raise ValueError(f"arc {self.id!r}: self-loop")
        if self.kind in ("physical", "charge"):
            if self.capacity_slope is None or self.capacity_slope <= 0:
                raise ValueError(f"arc {self.id!r}: capacity_slope must be > 0")
        if self.flow_cap < 0:
            raise ValueError(f"arc {self.id!r}: negative flow_cap")
        if self.free_flow_time < 0:
            raise ValueError(f"arc {self.id!r}: negative free_flow_time")


@dataclass(frozen=True)
class ChargingStation:
    """Station coupling a traffic node to a grid bus.

    avg_demand is the energy drawn per charging vehicle (kWh), charge_rate
    the station power (kW), so avg_demand/charge_rate is the charging time
    added to the charging arc's delay.  demand_cap = avg_demand * flow cap
    of the charge arc.
    """

    station_id: object
    traffic_node: object
    grid_bus: object
    avg_demand: float
    charge_rate: float
    charge_arc: object
    bypass_arc: object
    demand_cap: float

    def __post_init__(self):
        if self.avg_demand <= 0:
            raise ValueError(f"station {self.station_id!r}: avg_demand must be > 0")
        if self.charge_rate <= 0:
            raise ValueError(f"station {self.station_id!r}: charge_rate must be > 0")


@dataclass(frozen=True)
class ODPair:
    """Origin-destination pair with fixed travel demand split over routes."""

    pair_id: int
    origin: object
    destination: object
    demand: float
    routes: tuple

    def __post_init__(self):
        if self.demand < 0:
            raise ValueError(f"pair {self.pair_id}: negative demand")
        if self.demand > 0 and not self.routes:
            raise ValueError(f"pair {self.pair_id}: demand with no routes")


@dataclass(frozen=True)
class ExtendedTrafficNetwork:
    """Extended graph, stations, route catalogs and the time-value weight."""

    nodes: tuple
    arcs: tuple
    stations: tuple
    od_pairs: tuple
    time_value: float

    def __post_init__(self):
        kinds = [a.kind for a in self.arcs]
        n_phys = kinds.count("physical")
        n_stations = len(self.stations)
        expected = (["physical"] * n_phys + ["no_charge"] * n_stations
                    + ["charge"] * n_stations)
        if kinds != expected:
            raise ValueError("arc ordering must be [physical | no_charge | charge]")
        if len(self.arcs) != n_phys + 2 * n_stations:
            raise ValueError("arc count does not match station count")
        if self.time_value <= 0:
            raise ValueError("time_value must be > 0")
        index = {}
        for pos, arc in enumerate(self.arcs):
            if arc.id in index:
                raise ValueError(f"duplicate arc id {arc.id!r}")
            index[arc.id] = pos
        object.__setattr__(self, "_arc_index", index)

    @property
    def n_physical(self) -> int:
        return len(self.arcs) - 2 * len(self.stations)

    def arc_index(self, arc_id) -> int:
        return self._arc_index[arc_id]

    def charge_arc_indices(self) -> list:
        return [self.arc_index(s.charge_arc) for s in self.stations]

    def station_of_charge_arc(self, arc_id):
        for s in self.stations:
            if s.charge_arc == arc_id:
                return s
        raise KeyError(arc_id)


@dataclass(frozen=True)
class CompactQP:
    """Traffic assignment QP in matrix form over (xi, f).

    Objective .5 xi'Q xi + q(lam)'xi + eps_f ||f||^2 with
    q(lam) = q_base + [0; 0; J lam] (J carries avg_demand per station),
    subject to E f = m, A f = xi, G xi <= h with G = [-I; I], h = [0; cap].
    dims = (n_arcs, n_routes, n_pairs).
    """

    Q: np.ndarray
    q_base: np.ndarray
    J: np.ndarray
    E: np.ndarray
    m: np.ndarray
    A: np.ndarray
    G: np.ndarray
    h: np.ndarray
    dims: tuple
    eps_f: float

    @property
    def n_stations(self) -> int:
        return self.J.shape[0]

    @property
    def charge_slice(self) -> slice:
        return slice(self.dims[0] - self.n_stations, self.dims[0])

    def linear_cost(self, lam_c) -> np.ndarray:
        """Arc-cost vector q(lam): price enters only the charge block."""
        lam_c = np.atleast_1d(np.asarray(lam_c, dtype=float))
        if lam_c.shape[0] != self.n_stations:
            raise ValueError(f"expected {self.n_stations} prices, got {lam_c.shape[0]}")
        q = self.q_base.copy()
        q[self.charge_slice] += self.J @ lam_c
        return q


@dataclass(frozen=True)
class TrafficSolution:
    """Primal/dual traffic assignment at fixed prices.

    active holds sorted indices of tight rows of G xi <= h (the region
    fingerprint basis); psi/delta are the duals of the route-aggregation
    and arc-linkage equalities, phi of the flow bounds.
    """

    xi: np.ndarray
    f: np.ndarray
    psi: np.ndarray
    phi: np.ndarray
    delta: np.ndarray
    objective: float
    active: tuple


@dataclass(frozen=True)
class StationSpec:
    """Station description before graph construction."""

    node: object
    grid_bus: object
    avg_demand: float
    charge_rate: float
    flow_cap: float
    capacity_slope: float
    free_flow_time: float = 0.0
    station_id: object = None


@dataclass(frozen=True)
class OdSpec:
    """O-D pair description with base-graph routes and a charging policy.

    policy: "expand" splits every route at each station it passes into
    charge and bypass variants (all combinations); "charge" keeps variants
    charging at exactly one passed station (vehicles that must charge);
    "bypass" never charges; "explicit" takes routes already expressed over
    extended arc ids.
    """

    origin: object
    destination: object
    demand: float
    routes: tuple
    policy: str = "expand"

    def __post_init__(self):
        if self.policy not in ROUTE_POLICIES:
            raise ValueError(f"unknown route policy {self.policy!r}")
        object.__setattr__(self, "routes", tuple(tuple(r) for r in self.routes))


def travel_time(arc: Arc, flow: float, station: ChargingStation | None = None) -> float:
    """Delay on an arc at the given flow.

    Charge arcs add the per-vehicle charging time avg_demand/charge_rate,
    taken from ``station``; bypass arcs cost nothing.
    """
    if flow < 0:
        raise ValueError("negative flow")
    if arc.kind == "no_charge":
        return 0.0
    base = arc.free_flow_time + flow / arc.capacity_slope
    if arc.kind == "charge":
        if station is None:
            raise ValueError("charge arc requires its station parameters")
        return station.avg_demand / station.charge_rate + base
    return base


def _path_nodes(route, arcs_by_id, origin, destination, label):
    """Node sequence of a route, validated as a connected o->d path."""
    nodes = [origin]
    seen = set()
    for arc_id in route:
        if arc_id not in arcs_by_id:
            raise ValueError(f"{label}: unknown arc {arc_id!r}")
        if arc_id in seen:
            raise ValueError(f"{label}: arc {arc_id!r} repeated")
        seen.add(arc_id)
        arc = arcs_by_id[arc_id]
        if arc.tail != nodes[-1]:
            raise ValueError(f"{label}: arc {arc_id!r} does not continue the path")
        nodes.append(arc.head)
    if nodes[-1] != destination:
        raise ValueError(f"{label}: path ends at {nodes[-1]!r}, not the destination")
    return nodes


def _expand_routes(spec: OdSpec, base_arcs_by_id, station_at_node, label):
    """Rewrite base routes over the extended graph per the pair's policy."""
    variants = []
    for route in spec.routes:
        nodes = _path_nodes(route, base_arcs_by_id, spec.origin, spec.destination, label)
        # a station is visited when the path leaves its node, including a
        # departure from the origin; arriving at the destination is free
        visits = [station_at_node[v] for v in nodes[:-1] if v in station_at_node]
        if spec.policy == "expand":
            choices = itertools.product(*[("charge", "bypass")] * len(visits))
        elif spec.policy == "charge":
            if not visits:
                continue
            choices = [tuple("charge" if j == k else "bypass" for j in range(len(visits)))
                       for k in range(len(visits))]
        else:  # bypass
            choices = [("bypass",) * len(visits)]
        for combo in choices:
            picks = iter(combo)
            out = []
            pos = 0
            for arc_id in route:
                if nodes[pos] in station_at_node:
                    s = station_at_node[nodes[pos]]
                    out.append(s.charge_arc if next(picks) == "charge" else s.bypass_arc)
                out.append(arc_id)
                pos += 1
            variants.append(tuple(out))
    return variants


def build_extended_network(base_network, stations, od_pairs, time_value) -> ExtendedTrafficNetwork:
    """Splice station virtual arcs into a base graph and expand routes.

    :param base_network: dict with "nodes" (ids) and "arcs" (physical Arc list)
    :param stations: list of StationSpec; at most one per node
    :param od_pairs: list of OdSpec with base-graph routes (or extended ones
        under the "explicit" policy)
    :param time_value: cost per unit travel time, > 0
    """
    nodes = list(base_network["nodes"])
    if len(set(nodes)) != len(nodes):
        raise ValueError("duplicate node ids")
    node_set = set(nodes)
    base_arcs = list(base_network["arcs"])
    for arc in base_arcs:
        if arc.kind != "physical":
            raise ValueError(f"base arc {arc.id!r} must be physical")
        if arc.tail not in node_set or arc.head not in node_set:
            raise ValueError(f"arc {arc.id!r} references an unknown node")
    base_arcs_by_id = {a.id: a for a in base_arcs}
    if len(base_arcs_by_id) != len(base_arcs):
        raise ValueError("duplicate arc ids")

    built_stations = []
    station_at_node = {}
    rehome = {}  # station node -> auxiliary node
    for k, spec in enumerate(stations):
        sid = spec.station_id if spec.station_id is not None else k + 1
        if spec.node not in node_set:
            raise ValueError(f"station {sid!r} placed on unknown node {spec.node!r}")
        if spec.node in station_at_node:
            raise ValueError(f"two stations on node {spec.node!r}")
        aux = f"aux:{sid}"
        if aux in node_set:
            raise ValueError(f"node id {aux!r} collides with a station auxiliary node")
        if not np.isfinite(spec.flow_cap) or spec.flow_cap < 0:
            raise ValueError(f"station {sid!r}: flow_cap must be finite and >= 0")
        station = ChargingStation(
            station_id=sid, traffic_node=spec.node, grid_bus=spec.grid_bus,
            avg_demand=spec.avg_demand, charge_rate=spec.charge_rate,
            charge_arc=f"charge:{sid}", bypass_arc=f"bypass:{sid}",
            demand_cap=spec.avg_demand * spec.flow_cap)
        built_stations.append((station, spec, aux))
        station_at_node[spec.node] = station
        rehome[spec.node] = aux
        nodes.append(aux)

    physical = [replace(a, tail=rehome.get(a.tail, a.tail)) for a in base_arcs]
    bypass_arcs = [Arc(id=s.bypass_arc, tail=s.traffic_node, head=aux, kind="no_charge")
                   for s, _, aux in built_stations]
    charge_arcs = [Arc(id=s.charge_arc, tail=s.traffic_node, head=aux, kind="charge",
                       free_flow_time=spec.free_flow_time,
                       capacity_slope=spec.capacity_slope, flow_cap=spec.flow_cap)
                   for s, spec, aux in built_stations]
    arcs = tuple(physical + bypass_arcs + charge_arcs)
    ext_arcs_by_id = {a.id: a for a in arcs}

    pairs = []
    for w, spec in enumerate(od_pairs):
        label = f"pair {w}"
        if spec.origin not in node_set or spec.destination not in node_set:
            raise ValueError(f"{label}: endpoint not in the base graph")
        if spec.policy == "explicit":
            routes = [tuple(r) for r in spec.routes]
        else:
            routes = _expand_routes(spec, base_arcs_by_id, station_at_node, label)
        for route in routes:
            _path_nodes(route, ext_arcs_by_id, spec.origin, spec.destination, label)
        pairs.append(ODPair(pair_id=w, origin=spec.origin, destination=spec.destination,
                            demand=spec.demand, routes=tuple(routes)))

    return ExtendedTrafficNetwork(
        nodes=tuple(nodes), arcs=arcs,
        stations=tuple(s for s, _, _ in built_stations),
        od_pairs=tuple(pairs), time_value=time_value)


def assemble_traffic_qp(net: ExtendedTrafficNetwork, eps_f: float = DEFAULT_EPS_F) -> CompactQP:
    """Matrices of the assignment QP for the given network.

    Arcs with infinite flow_cap get a bound of twice the total travel
    demand plus one, which no feasible flow can reach.
    """
    if eps_f < 0:
        raise ValueError("eps_f must be >= 0")
    arcs = net.arcs
    n_arcs = len(arcs)
    gamma = net.time_value
    station_by_charge = {s.charge_arc: s for s in net.stations}

    q_diag = np.zeros(n_arcs)
    q_base = np.zeros(n_arcs)
    for k, arc in enumerate(arcs):
        if arc.kind == "no_charge":
            continue
        q_diag[k] = 2.0 * gamma / arc.capacity_slope
        q_base[k] = gamma * arc.free_flow_time
        if arc.kind == "charge":
            s = station_by_charge[arc.id]
            q_base[k] += gamma * s.avg_demand / s.charge_rate

    routes = [(w, route) for w, pair in enumerate(net.od_pairs) for route in pair.routes]
    n_routes = len(routes)
    n_pairs = len(net.od_pairs)
    e_mat = np.zeros((n_pairs, n_routes))
    a_mat = np.zeros((n_arcs, n_routes))
    for col, (w, route) in enumerate(routes):
        e_mat[w, col] = 1.0
        for arc_id in route:
            idx = net.arc_index(arc_id)
            if a_mat[idx, col]:
                raise ValueError(f"route column {col}: arc {arc_id!r} repeated")
            a_mat[idx, col] = 1.0
    m_vec = np.array([pair.demand for pair in net.od_pairs], dtype=float)

    big = 2.0 * float(m_vec.sum()) + 1.0
    caps = np.array([a.flow_cap if np.isfinite(a.flow_cap) else big for a in arcs])
    g_mat = np.vstack([-np.eye(n_arcs), np.eye(n_arcs)])
    h_vec = np.concatenate([np.zeros(n_arcs), caps])
    j_mat = np.diag([s.avg_demand for s in net.stations])

    return CompactQP(Q=np.diag(q_diag), q_base=q_base, J=j_mat, E=e_mat, m=m_vec,
                     A=a_mat, G=g_mat, h=h_vec, dims=(n_arcs, n_routes, n_pairs),
                     eps_f=eps_f)


def traffic_qp_problem(cqp: CompactQP, lam_c) -> QpProblem:
    """Standard-form QP over the stacked variable [xi; f]."""
    n_arcs, n_routes, n_pairs = cqp.dims
    n = n_arcs + n_routes
    h_full = np.zeros((n, n))
    h_full[:n_arcs, :n_arcs] = cqp.Q
    h_full[n_arcs:, n_arcs:] = 2.0 * cqp.eps_f * np.eye(n_routes)
    c = np.concatenate([cqp.linear_cost(lam_c), np.zeros(n_routes)])
    # equality rows: route aggregation E f = m, then arc linkage A f = xi
    a_eq = np.zeros((n_pairs + n_arcs, n))
    a_eq[:n_pairs, n_arcs:] = cqp.E
    a_eq[n_pairs:, :n_arcs] = -np.eye(n_arcs)
    a_eq[n_pairs:, n_arcs:] = cqp.A
    b_eq = np.concatenate([cqp.m, np.zeros(n_arcs)])
    a_in = np.hstack([cqp.G, np.zeros((2 * n_arcs, n_routes))])
    return QpProblem(h_full, c, a_eq=a_eq, b_eq=b_eq, a_in=a_in, b_in=cqp.h)


def solve_traffic(cqp: CompactQP, lam_c, active_tol: float | None = None) -> TrafficSolution:
    """Assignment at fixed prices, unpacked into (xi, f) and duals."""
    kwargs = {} if active_tol is None else {"active_tol": active_tol}
    point = solve_qp(traffic_qp_problem(cqp, lam_c), **kwargs)
    n_arcs, n_routes, n_pairs = cqp.dims
    xi = point.x[:n_arcs]
    f = point.x[n_arcs:]
    scale = 1.0 + np.abs(cqp.m).max(initial=0.0)
    if np.abs(cqp.E @ f - cqp.m).max(initial=0.0) > 1e-9 * scale:
        raise SolverFailureError("route flows do not meet travel demand")
    if np.abs(cqp.A @ f - xi).max(initial=0.0) > 1e-9 * scale:
        raise SolverFailureError("arc flows do not match route flows")
    return TrafficSolution(
        xi=xi, f=f, psi=point.eq_duals[:n_pairs], phi=point.in_duals,
        delta=point.eq_duals[n_pairs:], objective=point.objective,
        active=point.active)


def demand_from_flows(net: ExtendedTrafficNetwork, arc_flows) -> np.ndarray:
    """Station energy demands e_a * xi_a over the charge arcs (kWh)."""
    arc_flows = np.asarray(arc_flows, dtype=float)
    if arc_flows.shape[0] != len(net.arcs):
        raise ValueError(f"expected {len(net.arcs)} arc flows, got {arc_flows.shape[0]}")
    idx = net.charge_arc_indices()
    e = np.array([s.avg_demand for s in net.stations])
    return e * arc_flows[idx] if idx else np.zeros(0)


def latency_cost(net: ExtendedTrafficNetwork, arc_flows) -> float:
    """Time cost: time_value * sum over arcs of flow * delay(flow)."""
    arc_flows = np.asarray(arc_flows, dtype=float)
    total = 0.0
    for k, arc in enumerate(net.arcs):
        if arc.kind == "no_charge":
            continue
        station = (net.station_of_charge_arc(arc.id) if arc.kind == "charge" else None)
        total += net.time_value * arc_flows[k] * travel_time(arc, max(arc_flows[k], 0.0), station)
    return float(total)


def itso_cost(net: ExtendedTrafficNetwork, arc_flows, lam_c) -> float:
    """Driver-side cost: latency plus charging expense at prices lam_c."""
    d = demand_from_flows(net, arc_flows)
    return latency_cost(net, arc_flows) + float(np.asarray(lam_c, dtype=float) @ d)


TRAFFIC_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class TrafficFileSpec:
    """Parsed traffic file: the pieces build_extended_network consumes."""

    base: dict
    stations: tuple
    pairs: tuple
    time_value: float


def parse_traffic_spec(source) -> TrafficFileSpec:
    """Parse a JSON file path or an equivalent dict into build inputs.

    Schema (version 1): gamma; nodes; arcs [{id, tail, head,
    free_flow_time?, capacity_slope?, flow_cap?}]; defaults
    {free_flow_time?, capacity_slope?} applied where arcs/stations omit
    them; stations [{id?, node, grid_bus, avg_demand, charge_rate,
    flow_cap, free_flow_time?, capacity_slope?}]; od_pairs [{origin,
    destination, demand, routes: [[arc ids]], policy?}].
    """
    if isinstance(source, dict):
        data = source
    else:
        with open(source) as fh:
            data = json.load(fh)
    version = data.get("schema_version", TRAFFIC_SCHEMA_VERSION)
    if version != TRAFFIC_SCHEMA_VERSION:
        raise ValueError(f"unsupported traffic schema version {version!r}")
    try:
        gamma = float(data["gamma"])
        nodes = list(data["nodes"])
        defaults = data.get("defaults", {})
        d_xi0 = float(defaults.get("free_flow_time", 0.0))
        d_slope = defaults.get("capacity_slope")
        arcs = [Arc(id=a["id"], tail=a["tail"], head=a["head"],
                    free_flow_time=float(a.get("free_flow_time", d_xi0)),
                    capacity_slope=float(a["capacity_slope"]) if "capacity_slope" in a
                    else (float(d_slope) if d_slope is not None else None),
                    flow_cap=float(a.get("flow_cap", np.inf)))
                for a in data["arcs"]]
        stations = [StationSpec(node=s["node"], grid_bus=s["grid_bus"],
                                avg_demand=float(s["avg_demand"]),
                                charge_rate=float(s["charge_rate"]),
                                flow_cap=float(s["flow_cap"]),
                                capacity_slope=float(s["capacity_slope"]) if "capacity_slope" in s
                                else (float(d_slope) if d_slope is not None else None),
                                free_flow_time=float(s.get("free_flow_time", d_xi0)),
                                station_id=s.get("id"))
                    for s in data.get("stations", [])]
        pairs = [OdSpec(origin=p["origin"], destination=p["destination"],
                        demand=float(p["demand"]),
                        routes=tuple(tuple(r) for r in p["routes"]),
                        policy=p.get("policy", "expand"))
                 for p in data["od_pairs"]]
    except KeyError as exc:
        raise ValueError(f"traffic file missing field {exc}") from exc
    return TrafficFileSpec(base={"nodes": nodes, "arcs": arcs},
                           stations=tuple(stations), pairs=tuple(pairs),
                           time_value=gamma)


def load_traffic_network(source) -> ExtendedTrafficNetwork:
    """Build a network straight from a JSON file path or dict."""
    spec = parse_traffic_spec(source)
    return build_extended_network(spec.base, spec.stations, spec.pairs,
                                  spec.time_value)
