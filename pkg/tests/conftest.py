"""Shared instance builders for the test suite."""

import numpy as np

from evpricer.grid_model import Bus, DistributionCase, Generator, Line
from evpricer.traffic_model import (
    Arc,
    OdSpec,
    StationSpec,
    assemble_traffic_qp,
    build_extended_network,
)


def toy_traffic(flow_cap=60.0, demand=100.0, policy="expand", eps_f=0.0):
    """One corridor, one optional charging stop.

    Hand-solvable: with charge flow fc and bypass flow m - fc the charging
    cost is gamma (fc^2 / R + (e / rho) fc) + e lam fc, so the interior
    optimum is fc = -(gamma e / rho + e lam) R / (2 gamma), here
    fc = -300 - 60 lam, demand d = 12 fc with slope d d / d lam = -720.
    Regions over lam in [-10, 2]: cap-bound (lam <= -6), interior
    (-6 <= lam <= -5), no charging (lam >= -5).
    """
    base = {
        "nodes": [1, 2],
        "arcs": [Arc(id="a0", tail=1, head=2, capacity_slope=1.0e4)],
    }
    stations = [StationSpec(node=1, grid_bus=2, avg_demand=12.0,
                            charge_rate=200.0, flow_cap=flow_cap,
                            capacity_slope=1.0e4)]
    pairs = [OdSpec(origin=1, destination=2, demand=demand,
                    routes=[("a0",)], policy=policy)]
    net = build_extended_network(base, stations, pairs, time_value=1.0e3)
    return net, assemble_traffic_qp(net, eps_f=eps_f)


TOY_BOX = (-10.0, 2.0)
TOY_SLOPE = -720.0  # e^2 R / (2 gamma) with e=12, R=1e4, gamma=1e3
TOY_FACETS = (-6.0, -5.0)


def toy_grid(load=100.0):
    """Two-bus feeder; the station sits on bus 2."""
    return DistributionCase(
        buses=[Bus(id=1), Bus(id=2, load=load)],
        lines=[Line(from_bus=1, to_bus=2, r=0.01, x=0.05)],
        generators=[Generator(bus=1, capacity=1.0e4, cost=0.5)],
        station_buses=[2],
    )


def corridor_two_station(eps_f=1e-8):
    """Two stations on a single corridor, coupled through congestion.

    All route variants (charge or bypass at each stop) are generated, so
    the price box [-8, 1]^2 contains several active-set regions: charging
    off, one or both stations charging, and cap-bound mixtures.
    """
    base = {
        "nodes": [1, 2, 3],
        "arcs": [
            Arc(id="a1", tail=1, head=2, free_flow_time=0.01,
                capacity_slope=2000.0),
            Arc(id="a2", tail=2, head=3, free_flow_time=0.01,
                capacity_slope=2000.0),
        ],
    }
    stations = [
        StationSpec(node=1, grid_bus=1, avg_demand=10.0, charge_rate=250.0,
                    flow_cap=25.0, capacity_slope=1500.0),
        StationSpec(node=2, grid_bus=2, avg_demand=10.0, charge_rate=250.0,
                    flow_cap=25.0, capacity_slope=1500.0),
    ]
    pairs = [OdSpec(origin=1, destination=3, demand=80.0,
                    routes=[("a1", "a2")], policy="expand")]
    net = build_extended_network(base, stations, pairs, time_value=1.0e3)
    return net, assemble_traffic_qp(net, eps_f=eps_f)


CORRIDOR_BOX = ((-8.0, 1.0), (-8.0, 1.0))


def corridor_grid():
    """Uncongested two-bus feeder for the two-station corridor; angle
    stationarity ties the two nodal prices together."""
    return DistributionCase(
        buses=[Bus(id=1, load=50.0), Bus(id=2, load=50.0)],
        lines=[Line(from_bus=1, to_bus=2, r=0.01, x=0.05)],
        generators=[Generator(bus=1, capacity=1.0e4, cost=0.5)],
        station_buses=[1, 2],
    )


def must_charge_instance():
    """Two stations with asymmetric grid and road congestion.

    Every vehicle must charge exactly once.  Station A sits on a bus kept
    expensive by a congested feeder line (local generation at 1.2), B on a
    cheap bus (0.3), but B's charge arc congests much faster (slope 2000
    vs 10000).  The joint optimum splits the 100 vehicles interior;
    price-only assignment piles onto B's cap first.
    """
    base = {
        "nodes": [1, 2, 3],
        "arcs": [
            Arc(id="a1", tail=1, head=2, free_flow_time=0.01,
                capacity_slope=1.0e4),
            Arc(id="a2", tail=2, head=3, free_flow_time=0.01,
                capacity_slope=1.0e4),
        ],
    }
    stations = [
        StationSpec(node=1, grid_bus=2, avg_demand=10.0, charge_rate=250.0,
                    flow_cap=80.0, capacity_slope=1.0e4),
        StationSpec(node=2, grid_bus=3, avg_demand=10.0, charge_rate=250.0,
                    flow_cap=80.0, capacity_slope=2000.0),
    ]
    pairs = [OdSpec(origin=1, destination=3, demand=100.0,
                    routes=[("a1", "a2")], policy="charge")]
    net = build_extended_network(base, stations, pairs, time_value=1.0e3)
    case = DistributionCase(
        buses=[Bus(id=1), Bus(id=2, load=400.0), Bus(id=3, load=50.0)],
        lines=[Line(from_bus=1, to_bus=2, r=0.01, x=0.05, flow_limit=300.0),
               Line(from_bus=1, to_bus=3, r=0.01, x=0.05)],
        generators=[Generator(bus=1, capacity=1.0e5, cost=0.3),
                    Generator(bus=2, capacity=1.0e5, cost=1.2)],
        station_buses=[2, 3],
    )
    return net, case


MUST_CHARGE_BOX = ((0.0, 2.4), (0.0, 2.4))


def oscillating_instance():
    """Symmetric pair of stations whose bus price spikes exactly when the
    station is loaded, so the cheapest-station rule alternates forever."""
    base = {
        "nodes": [1, 2, 3],
        "arcs": [
            Arc(id="a1", tail=1, head=2, free_flow_time=0.01,
                capacity_slope=1.0e4),
            Arc(id="a2", tail=2, head=3, free_flow_time=0.01,
                capacity_slope=1.0e4),
        ],
    }
    stations = [
        StationSpec(node=1, grid_bus=2, avg_demand=1.0, charge_rate=250.0,
                    flow_cap=200.0, capacity_slope=1.0e4),
        StationSpec(node=2, grid_bus=3, avg_demand=1.0, charge_rate=250.0,
                    flow_cap=200.0, capacity_slope=1.0e4),
    ]
    pairs = [OdSpec(origin=1, destination=3, demand=100.0,
                    routes=[("a1", "a2")], policy="charge")]
    net = build_extended_network(base, stations, pairs, time_value=1.0e3)
    case = DistributionCase(
        buses=[Bus(id=1), Bus(id=2), Bus(id=3)],
        lines=[Line(from_bus=1, to_bus=2, r=0.01, x=0.05, flow_limit=50.0),
               Line(from_bus=1, to_bus=3, r=0.01, x=0.05, flow_limit=50.0)],
        generators=[Generator(bus=1, capacity=1.0e4, cost=0.1),
                    Generator(bus=2, capacity=1.0e4, cost=1.0),
                    Generator(bus=3, capacity=1.0e4, cost=1.0)],
        station_buses=[2, 3],
    )
    return net, case


def interior_samples(region, rng, count=5, margin=1e-3):
    """Points strictly inside a region, rejection-sampled around its
    Chebyshev center; margin is a facet clearance in normalized units,
    generous enough for finite-difference probes."""
    out = [region.interior_point]
    norms = np.linalg.norm(region.rows, axis=1)
    radius = region.radius
    while len(out) < count:
        p = region.interior_point + rng.uniform(-0.5, 0.5, region.interior_point.shape) * radius
        if ((region.rows @ p - region.rhs) / norms).max(initial=-np.inf) < -margin:
            out.append(p)
    return out


def random_instance(seed):
    """Random coupled instance on a corridor of 4 to 8 traffic nodes with
    1 to 3 stations and 1 to 3 O-D pairs of 2 to 4 routes each.  Route
    flows are free in sign, so an elastic pair sharing a charge arc with a
    forced pair could cancel its charging; here only charge-policy pairs
    touch charge arcs, which keeps the demand real and the bounds crisp.
    Bypass-policy background pairs cover the no-charge arcs (an unused arc
    row pins its flow at zero and degenerates the bound) and parallel
    shortcuts are priced near the chain segment they skip so both sides
    carry flow.  The grid is a 4 to 8 bus feeder with end generators sized
    to stay feasible whatever one throttled middle line does."""
    rng = np.random.default_rng(seed)

    k = int(rng.integers(4, 9))
    n_od = int(rng.choice([1, 2, 3], p=[0.15, 0.45, 0.4]))
    top_st = min(3, k - 2)
    n_st = int(rng.choice(np.arange(1, top_st + 1))) if n_od > 1 else \
        int(rng.integers(1, min(top_st, 2) + 1))
    station_nodes = sorted(int(v) for v in
                           rng.choice(np.arange(2, k), size=n_st, replace=False))
    arcs = [Arc(id=f"p{i}", tail=i, head=i + 1,
                free_flow_time=float(rng.uniform(0.005, 0.02)),
                capacity_slope=float(rng.uniform(2e3, 2e4)))
            for i in range(1, k)]
    t0 = {a.id: a.free_flow_time for a in arcs}
    chain = tuple(f"p{i}" for i in range(1, k))

    demands = rng.uniform(60.0, 160.0, n_od)
    pairs = []
    if n_od == 1:
        # lone pair: optional charging at every station, 2^n_st <= 4 routes
        pairs.append(OdSpec(origin=1, destination=k, demand=float(demands[0]),
                            routes=(chain,), policy="expand"))
    elif n_st == 1:
        # one station forces a single charge variant per base route, so the
        # must pair needs a second base: a shortcut past the first arc
        arcs.append(Arc(id="x1", tail=1, head=2,
                        free_flow_time=t0["p1"] * float(rng.uniform(0.7, 1.5)),
                        capacity_slope=float(rng.uniform(2e3, 2e4))))
        pairs.append(OdSpec(origin=1, destination=k, demand=float(demands[0]),
                            routes=(chain, ("x1",) + chain[1:]), policy="charge"))
    else:
        pairs.append(OdSpec(origin=1, destination=k, demand=float(demands[0]),
                            routes=(chain,), policy="charge"))
    if n_od >= 2:
        # full-span background traffic rides every bypass arc; the direct
        # expressway gives it a price-independent alternative
        arcs.append(Arc(id="x0", tail=1, head=k,
                        free_flow_time=sum(t0.values()) * float(rng.uniform(0.8, 1.4)),
                        capacity_slope=float(rng.uniform(2e3, 2e4))))
        pairs.append(OdSpec(origin=1, destination=k, demand=float(demands[1]),
                            routes=(chain, ("x0",)), policy="bypass"))
    if n_od == 3:
        if n_st >= 2 and rng.random() < 0.5:
            # second forced pair entering one hop downstream; it shares the
            # stations, which only reshuffles who charges where
            pairs.append(OdSpec(origin=2, destination=k, demand=float(demands[2]),
                                routes=(chain[1:],), policy="charge"))
        else:
            a, b = sorted(int(v) for v in
                          rng.choice(np.arange(1, k + 1), size=2, replace=False))
            seg = tuple(f"p{i}" for i in range(a, b))
            arcs.append(Arc(id="x2", tail=a, head=b,
                            free_flow_time=(sum(t0[p] for p in seg)
                                            * float(rng.uniform(0.7, 1.5))),
                            capacity_slope=float(rng.uniform(2e3, 2e4))))
            pairs.append(OdSpec(origin=a, destination=b, demand=float(demands[2]),
                                routes=(seg, ("x2",)), policy="bypass"))

    must_total = sum(p.demand for p in pairs if p.policy == "charge")
    caps = rng.uniform(0.3, 0.7, n_st) * max(must_total, float(demands[0]))
    if caps.sum() < 1.15 * must_total:
        caps *= 1.15 * must_total / caps.sum()

    n_b = int(rng.integers(4, 9))
    grid_buses = [int(b) for b in
                  rng.choice(np.arange(2, n_b + 1), size=n_st, replace=False)]
    stations = [StationSpec(node=node, grid_bus=bus,
                            avg_demand=float(rng.uniform(5.0, 15.0)),
                            charge_rate=float(rng.uniform(150.0, 300.0)),
                            flow_cap=float(cap),
                            capacity_slope=float(rng.uniform(2e3, 2e4)))
                for node, bus, cap in zip(station_nodes, grid_buses, caps)]
    net = build_extended_network({"nodes": list(range(1, k + 1)), "arcs": arcs},
                                 stations, pairs,
                                 time_value=float(rng.uniform(500.0, 2000.0)))

    loads = rng.uniform(20.0, 60.0, n_b)
    loads[0] = 0.0
    charge_cap = sum(st.avg_demand * st.flow_cap for st in stations)
    gen_cap = 2.0 * (loads.sum() + charge_cap)
    costs = rng.uniform(0.3, 1.0, 3)
    gens = [Generator(bus=1, capacity=gen_cap, cost=float(costs[0])),
            Generator(bus=n_b, capacity=gen_cap, cost=float(costs[1]))]
    if n_b >= 5 and rng.random() < 0.5:
        gens.append(Generator(bus=n_b // 2, capacity=gen_cap, cost=float(costs[2])))
    tight = int(rng.integers(1, n_b))
    lines = [Line(from_bus=i, to_bus=i + 1,
                  r=float(rng.uniform(0.005, 0.02)),
                  x=float(rng.uniform(0.02, 0.08)),
                  flow_limit=(float(rng.uniform(0.3, 0.8) * (loads.sum() + charge_cap))
                              if i == tight else np.inf))
             for i in range(1, n_b)]
    case = DistributionCase(buses=[Bus(id=i + 1, load=float(loads[i]))
                                   for i in range(n_b)],
                            lines=lines, generators=gens,
                            station_buses=grid_buses)
    return net, case
