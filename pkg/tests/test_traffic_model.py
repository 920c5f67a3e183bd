"""Unit tests for the extended traffic graph and its assignment QP."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evpricer.traffic_model import (
    Arc,
    OdSpec,
    StationSpec,
    assemble_traffic_qp,
    build_extended_network,
    demand_from_flows,
    itso_cost,
    latency_cost,
    load_traffic_network,
    solve_traffic,
    travel_time,
)


def two_node_net(flow_cap=60.0, demand=100.0, policy="expand"):
    """One physical arc 1->2 with a station on node 1."""
    base = {"nodes": [1, 2],
            "arcs": [Arc(id="a0", tail=1, head=2, capacity_slope=1e4)]}
    stations = [StationSpec(node=1, grid_bus="b1", avg_demand=12.0, charge_rate=200.0,
                            flow_cap=flow_cap, capacity_slope=1e4)]
    pairs = [OdSpec(origin=1, destination=2, demand=demand, routes=[["a0"]], policy=policy)]
    return build_extended_network(base, stations, pairs, time_value=1e3)


# ---------------------------------------------------------------- delays

def test_travel_time_physical():
    arc = Arc(id="a", tail=1, head=2, capacity_slope=1e4)
    assert travel_time(arc, 100.0) == pytest.approx(0.01)


def test_travel_time_charging():
    net = two_node_net()
    charge = net.arcs[-1]
    station = net.stations[0]
    assert travel_time(charge, 0.0, station) == pytest.approx(0.06)
    assert travel_time(charge, 100.0, station) == pytest.approx(0.07)


def test_travel_time_bypass_free():
    net = two_node_net()
    bypass = net.arcs[1]
    assert travel_time(bypass, 12345.0) == 0.0


def test_travel_time_negative_flow():
    arc = Arc(id="a", tail=1, head=2, capacity_slope=1e4)
    with pytest.raises(ValueError):
        travel_time(arc, -1.0)


# ---------------------------------------------------------------- graph build

def test_extended_arc_count_and_order():
    net = two_node_net()
    assert len(net.arcs) == 3  # 1 physical + bypass + charge
    assert [a.kind for a in net.arcs] == ["physical", "no_charge", "charge"]
    s = net.stations[0]
    assert s.demand_cap == pytest.approx(12.0 * 60.0)
    charge, bypass = net.arcs[2], net.arcs[1]
    assert (charge.tail, charge.head) == (bypass.tail, bypass.head)


def test_two_arcs_one_station_gives_four():
    base = {"nodes": [1, 2, 3],
            "arcs": [Arc(id="a0", tail=1, head=2, capacity_slope=1e4),
                     Arc(id="a1", tail=2, head=3, capacity_slope=1e4)]}
    stations = [StationSpec(node=2, grid_bus="b", avg_demand=12.0, charge_rate=200.0,
                            flow_cap=50.0, capacity_slope=1e4)]
    pairs = [OdSpec(origin=1, destination=3, demand=10.0, routes=[["a0", "a1"]])]
    net = build_extended_network(base, stations, pairs, 1e3)
    assert len(net.arcs) == 4


def test_zero_stations_identity():
    base = {"nodes": [1, 2],
            "arcs": [Arc(id="a0", tail=1, head=2, capacity_slope=1e4)]}
    pairs = [OdSpec(origin=1, destination=2, demand=5.0, routes=[["a0"]])]
    net = build_extended_network(base, [], pairs, 1e3)
    assert len(net.arcs) == 1
    assert net.od_pairs[0].routes == (("a0",),)


def test_route_expansion_splits_at_station():
    net = two_node_net()
    routes = net.od_pairs[0].routes
    assert routes == (("charge:1", "a0"), ("bypass:1", "a0"))


def test_route_through_midpath_station():
    base = {"nodes": [1, 2, 3],
            "arcs": [Arc(id="a0", tail=1, head=2, capacity_slope=1e4),
                     Arc(id="a1", tail=2, head=3, capacity_slope=1e4)]}
    stations = [StationSpec(node=2, grid_bus="b", avg_demand=12.0, charge_rate=200.0,
                            flow_cap=50.0, capacity_slope=1e4)]
    pairs = [OdSpec(origin=1, destination=3, demand=10.0, routes=[["a0", "a1"]])]
    net = build_extended_network(base, stations, pairs, 1e3)
    assert net.od_pairs[0].routes == (("a0", "charge:1", "a1"), ("a0", "bypass:1", "a1"))


def test_trip_ending_at_station_node_skips_virtual_arcs():
    base = {"nodes": [1, 2],
            "arcs": [Arc(id="a0", tail=1, head=2, capacity_slope=1e4)]}
    stations = [StationSpec(node=2, grid_bus="b", avg_demand=12.0, charge_rate=200.0,
                            flow_cap=50.0, capacity_slope=1e4)]
    pairs = [OdSpec(origin=1, destination=2, demand=10.0, routes=[["a0"]])]
    net = build_extended_network(base, stations, pairs, 1e3)
    assert net.od_pairs[0].routes == (("a0",),)


def test_charge_policy_exactly_one_station():
    base = {"nodes": [1, 2, 3],
            "arcs": [Arc(id="a0", tail=1, head=2, capacity_slope=1e4),
                     Arc(id="a1", tail=2, head=3, capacity_slope=1e4)]}
    stations = [StationSpec(node=1, grid_bus="b1", avg_demand=12.0, charge_rate=200.0,
                            flow_cap=50.0, capacity_slope=1e4),
                StationSpec(node=2, grid_bus="b2", avg_demand=12.0, charge_rate=200.0,
                            flow_cap=50.0, capacity_slope=1e4)]
    pairs = [OdSpec(origin=1, destination=3, demand=10.0, routes=[["a0", "a1"]],
                    policy="charge")]
    net = build_extended_network(base, stations, pairs, 1e3)
    assert net.od_pairs[0].routes == (
        ("charge:1", "a0", "bypass:2", "a1"),
        ("bypass:1", "a0", "charge:2", "a1"))


def test_charge_policy_without_station_on_route_fails():
    base = {"nodes": [1, 2],
            "arcs": [Arc(id="a0", tail=1, head=2, capacity_slope=1e4)]}
    pairs = [OdSpec(origin=1, destination=2, demand=10.0, routes=[["a0"]],
                    policy="charge")]
    with pytest.raises(ValueError):
        build_extended_network(base, [], pairs, 1e3)


def test_bad_inputs_rejected():
    base = {"nodes": [1, 2],
            "arcs": [Arc(id="a0", tail=1, head=2, capacity_slope=1e4)]}
    good_station = dict(grid_bus="b", avg_demand=12.0, charge_rate=200.0,
                        flow_cap=50.0, capacity_slope=1e4)
    with pytest.raises(ValueError):  # station on a node that does not exist
        build_extended_network(base, [StationSpec(node=9, **good_station)],
                               [OdSpec(1, 2, 1.0, [["a0"]])], 1e3)
    with pytest.raises(ValueError):  # disconnected route
        build_extended_network(base, [], [OdSpec(1, 2, 1.0, [["a0", "a0"]])], 1e3)
    with pytest.raises(ValueError):  # route referencing unknown arc
        build_extended_network(base, [], [OdSpec(1, 2, 1.0, [["zz"]])], 1e3)
    with pytest.raises(ValueError):  # two stations on one node
        build_extended_network(base, [StationSpec(node=1, **good_station),
                                      StationSpec(node=1, **good_station)],
                               [OdSpec(1, 2, 1.0, [["a0"]])], 1e3)


# ---------------------------------------------------------------- QP assembly

def test_q_diagonal_values():
    net = two_node_net()
    cqp = assemble_traffic_qp(net)
    np.testing.assert_allclose(np.diag(cqp.Q), [0.2, 0.0, 0.2])
    assert np.count_nonzero(np.diag(cqp.Q) == 0.0) == len(net.stations)


def test_price_injection_diagonal():
    base = {"nodes": [1, 2, 3],
            "arcs": [Arc(id="a0", tail=1, head=2, capacity_slope=1e4),
                     Arc(id="a1", tail=2, head=3, capacity_slope=1e4)]}
    stations = [StationSpec(node=1, grid_bus="b1", avg_demand=12.0, charge_rate=200.0,
                            flow_cap=50.0, capacity_slope=1e4),
                StationSpec(node=2, grid_bus="b2", avg_demand=12.0, charge_rate=200.0,
                            flow_cap=50.0, capacity_slope=1e4)]
    pairs = [OdSpec(origin=1, destination=3, demand=10.0, routes=[["a0", "a1"]])]
    cqp = assemble_traffic_qp(build_extended_network(base, stations, pairs, 1e3))
    np.testing.assert_array_equal(cqp.J, 12.0 * np.eye(2))


def test_linear_cost_charge_entry():
    cqp = assemble_traffic_qp(two_node_net())
    q = cqp.linear_cost([0.5])
    assert q[-1] == pytest.approx(66.0)  # 1e3 * 0.06 + 12 * 0.5
    np.testing.assert_allclose(q[:2], [0.0, 0.0])


def test_aggregation_and_link_matrices():
    net = two_node_net()
    cqp = assemble_traffic_qp(net)
    assert cqp.dims == (3, 2, 1)
    np.testing.assert_array_equal(cqp.E, [[1.0, 1.0]])
    # columns: charge route uses (charge, a0); bypass route uses (bypass, a0)
    np.testing.assert_array_equal(cqp.A, [[1.0, 1.0], [0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_array_equal(cqp.G, np.vstack([-np.eye(3), np.eye(3)]))
    np.testing.assert_allclose(cqp.h, [0, 0, 0, 201.0, 201.0, 60.0])


# ---------------------------------------------------------------- solve

def test_interior_split_matches_hand_solution():
    # optimal charge flow solves 0.2 f = -(60 + 12 lam), here f = 30
    cqp = assemble_traffic_qp(two_node_net(), eps_f=0.0)
    sol = solve_traffic(cqp, [-5.5])
    np.testing.assert_allclose(sol.xi, [100.0, 70.0, 30.0], atol=1e-7)
    assert sol.active == ()


def test_no_charging_at_zero_price():
    cqp = assemble_traffic_qp(two_node_net(), eps_f=0.0)
    sol = solve_traffic(cqp, [0.0])
    np.testing.assert_allclose(sol.xi, [100.0, 100.0, 0.0], atol=1e-7)
    assert sol.active == (2,)  # charge-arc lower bound


def test_saturated_at_deep_negative_price():
    cqp = assemble_traffic_qp(two_node_net(), eps_f=0.0)
    sol = solve_traffic(cqp, [-10.0])
    np.testing.assert_allclose(sol.xi, [100.0, 40.0, 60.0], atol=1e-7)
    assert sol.active == (5,)  # charge-arc cap


def test_regularization_barely_moves_solution():
    net = two_node_net()
    exact = solve_traffic(assemble_traffic_qp(net, eps_f=0.0), [-5.5])
    soft = solve_traffic(assemble_traffic_qp(net, eps_f=1e-8), [-5.5])
    np.testing.assert_allclose(soft.xi, exact.xi, atol=1e-5)


def test_demand_from_flows():
    net = two_node_net()
    d = demand_from_flows(net, [100.0, 50.0, 50.0])
    np.testing.assert_allclose(d, [600.0])
    np.testing.assert_allclose(demand_from_flows(net, [100.0, 0.0, 100.0]), [1200.0])
    np.testing.assert_allclose(demand_from_flows(net, [100.0, 100.0, 0.0]), [0.0])


def test_demand_from_flows_no_stations():
    base = {"nodes": [1, 2],
            "arcs": [Arc(id="a0", tail=1, head=2, capacity_slope=1e4)]}
    net = build_extended_network(base, [], [OdSpec(1, 2, 1.0, [["a0"]])], 1e3)
    assert demand_from_flows(net, [1.0]).shape == (0,)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(-8.0, 2.0))
def test_objective_identity_property(seed, lam):
    """Matrix objective equals per-arc latency cost plus charging expense."""
    rng = np.random.default_rng(seed)
    net = two_node_net()
    cqp = assemble_traffic_qp(net, eps_f=0.0)
    split = rng.uniform(0.0, 1.0)
    f = np.array([100.0 * split, 100.0 * (1 - split)])
    xi = cqp.A @ f
    quad = 0.5 * xi @ cqp.Q @ xi + cqp.linear_cost([lam]) @ xi
    direct = itso_cost(net, xi, [lam])
    assert quad == pytest.approx(direct, rel=1e-9, abs=1e-9)


def test_latency_cost_hand_value():
    net = two_node_net()
    # a0 at 100: 1e3 * 100 * 0.01 = 1000; charge at 30: 1e3 * 30 * 0.063 = 1890
    assert latency_cost(net, [100.0, 70.0, 30.0]) == pytest.approx(1000.0 + 1890.0)


# ---------------------------------------------------------------- loader

def traffic_dict():
    return {
        "schema_version": 1,
        "gamma": 1e3,
        "defaults": {"free_flow_time": 0.0, "capacity_slope": 1e4},
        "nodes": [1, 2],
        "arcs": [{"id": "a0", "tail": 1, "head": 2}],
        "stations": [{"node": 1, "grid_bus": "b1", "avg_demand": 12.0,
                      "charge_rate": 200.0, "flow_cap": 60.0}],
        "od_pairs": [{"origin": 1, "destination": 2, "demand": 100.0,
                      "routes": [["a0"]]}],
    }


def test_loader_round_trip(tmp_path):
    import json

    path = tmp_path / "net.json"
    path.write_text(json.dumps(traffic_dict()))
    net = load_traffic_network(str(path))
    assert len(net.arcs) == 3
    assert net.stations[0].avg_demand == 12.0
    cqp = assemble_traffic_qp(net)
    np.testing.assert_allclose(np.diag(cqp.Q), [0.2, 0.0, 0.2])


def test_loader_accepts_dict():
    net = load_traffic_network(traffic_dict())
    assert net.od_pairs[0].demand == 100.0


def test_loader_rejects_bad_version():
    bad = traffic_dict()
    bad["schema_version"] = 99
    with pytest.raises(ValueError):
        load_traffic_network(bad)


def test_loader_rejects_missing_field():
    bad = traffic_dict()
    del bad["gamma"]
    with pytest.raises(ValueError):
        load_traffic_network(bad)
