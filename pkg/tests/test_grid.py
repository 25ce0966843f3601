import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import newton_raphson
from voltgrid.grid import (
    DeploymentMap,
    DuplicateLineError,
    NetworkError,
    NonRadialError,
    evcs_neighborhood,
    load_network,
    neighbors_one_hop,
    network_to_dict,
    solve_power_flow,
)


def _doc(net):
    return network_to_dict(net)


def test_bundled_33bus_shape(ieee33):
    assert ieee33.n_bus == 33
    assert len(ieee33.lines) == 32
    assert ieee33.slack_bus == 1
    assert ieee33.base_load_kw.sum() == pytest.approx(3715.0)
    assert ieee33.base_load_kvar.sum() == pytest.approx(2300.0)


def test_two_bus_fixture(two_bus):
    assert two_bus.n_bus == 2
    assert two_bus.z_base_ohm == pytest.approx(1.0)


def test_load_network_accepts_json_string_and_mapping(two_bus):
    doc = _doc(two_bus)
    assert load_network(json.dumps(doc)).bus_ids == (1, 2)
    assert load_network(doc).bus_ids == (1, 2)


def test_duplicate_line_rejected(two_bus):
    doc = _doc(two_bus)
    doc["lines"].append(dict(doc["lines"][0]))
    with pytest.raises(DuplicateLineError, match="duplicate"):
        load_network(doc)


def test_cycle_rejected(ieee33):
    doc = _doc(ieee33)
    doc["lines"][-1] = {"from": 18, "to": 33, "r_ohm": 0.5, "x_ohm": 0.5}
    doc["lines"].append({"from": 1, "to": 33, "r_ohm": 0.5, "x_ohm": 0.5})
    with pytest.raises(NonRadialError):
        load_network(doc)


def test_disconnected_rejected(ieee33):
    doc = _doc(ieee33)
    doc["lines"].pop()
    with pytest.raises(NonRadialError, match="disconnected"):
        load_network(doc)


@pytest.mark.parametrize("field", ["r_ohm", "x_ohm"])
def test_nonpositive_impedance_rejected(two_bus, field):
    doc = _doc(two_bus)
    doc["lines"][0][field] = 0.0
    with pytest.raises(NetworkError, match="nonpositive"):
        load_network(doc)


def test_malformed_document():
    with pytest.raises(NetworkError):
        load_network({"buses": [{"id": 1}], "slack": 1})


def test_slack_voltage_outside_limits(two_bus):
    doc = _doc(two_bus)
    doc["v_slack"] = 1.2
    with pytest.raises(NetworkError):
        load_network(doc)


def _random_tree_doc(rng, n):
    buses = [{"id": i + 1, "p_load_kw": 0.0, "q_load_kvar": 0.0} for i in range(n)]
    lines = [{"from": int(rng.integers(1, i + 1)), "to": i + 1, "r_ohm": 0.1, "x_ohm": 0.1} for i in range(1, n)]
    return {"buses": buses, "lines": lines, "slack": 1, "base_kva": 1000, "base_kv": 1, "v_min": 0.95, "v_max": 1.05}


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2**31 - 1), st.booleans())
def test_radiality_iff_spanning_tree(n, seed, add_edge):
    rng = np.random.default_rng(seed)
    doc = _random_tree_doc(rng, n)
    if not add_edge:
        assert load_network(doc).n_bus == n
        return
    pairs = {frozenset((l["from"], l["to"])) for l in doc["lines"]}
    extra = [(a, b) for a in range(1, n + 1) for b in range(a + 1, n + 1) if frozenset((a, b)) not in pairs]
    if not extra:
        # complete graph on two buses: the only extra edge is a duplicate
        doc["lines"].append(dict(doc["lines"][0]))
    else:
        a, b = extra[int(rng.integers(len(extra)))]
        doc["lines"].append({"from": a, "to": b, "r_ohm": 0.1, "x_ohm": 0.1})
    with pytest.raises(NonRadialError):
        load_network(doc)


# ---------------------------------------------------------------- topology

def test_neighbors_two_bus(two_bus):
    assert neighbors_one_hop(two_bus, 2) == {1}
    assert neighbors_one_hop(two_bus, 1) == {2}


def test_neighbors_33bus_leaf_and_junction(ieee33):
    # enumerated from the fixture's line list
    assert neighbors_one_hop(ieee33, 18) == {17}
    assert neighbors_one_hop(ieee33, 33) == {32}
    assert neighbors_one_hop(ieee33, 2) == {1, 3, 19}
    assert neighbors_one_hop(ieee33, 3) == {2, 4, 23}
    assert neighbors_one_hop(ieee33, 6) == {5, 7, 26}
    assert ieee33.max_degree == 3


def test_neighbors_symmetric(ieee33):
    for i in ieee33.bus_ids:
        for j in neighbors_one_hop(ieee33, i):
            assert i in neighbors_one_hop(ieee33, j)
            assert j != i


def test_neighbors_unknown_bus(ieee33):
    with pytest.raises(KeyError):
        neighbors_one_hop(ieee33, 99)


def test_evcs_neighborhood(two_bus, ieee33):
    assert evcs_neighborhood(two_bus, DeploymentMap((2,)), 0) == {1}
    dep = DeploymentMap((8, 12, 14, 30))
    assert evcs_neighborhood(ieee33, dep, 0) == {7, 9}
    assert evcs_neighborhood(ieee33, dep, 3) == neighbors_one_hop(ieee33, 30)
    with pytest.raises(KeyError):
        evcs_neighborhood(ieee33, dep, 4)


def test_deployment_validation(ieee33):
    with pytest.raises(ValueError):
        DeploymentMap((8, 8))
    with pytest.raises(NetworkError):
        DeploymentMap((1,)).validate(ieee33)
    with pytest.raises(NetworkError):
        DeploymentMap((40,)).validate(ieee33)
    m = DeploymentMap((8, 12)).matrix(ieee33)
    assert m.sum(axis=0).tolist() == [1, 1] and m.sum(axis=1).max() == 1


# ---------------------------------------------------------------- power flow

def test_flat_start_identity(ieee33):
    r = solve_power_flow(ieee33, np.zeros(33), np.zeros(33))
    assert r.converged and r.iterations == 1
    assert np.all(r.voltages == ieee33.v_slack)


def test_two_bus_matches_newton_raphson(two_bus):
    p = np.array([0.0, -0.1])
    q = np.array([0.0, -0.05])
    r = solve_power_flow(two_bus, p, q)
    ref = newton_raphson(two_bus, p, q)
    assert r.converged
    assert abs(r.voltages[1] - ref[1]) <= 1e-6
    # closed form: |V|^4 + (2(rP + xQ) - 1)|V|^2 + (r^2 + x^2)(P^2 + Q^2) = 0
    a = 2 * (0.05 * 0.1 + 0.05 * 0.05) - 1
    c = (0.05**2 * 2) * (0.1**2 + 0.05**2)
    v2 = (-a + np.sqrt(a * a - 4 * c)) / 2
    assert r.voltages[1] == pytest.approx(np.sqrt(v2), abs=1e-9)


def test_33bus_nominal_load_matches_newton_raphson(ieee33):
    p, q = ieee33.base_injection_pu()
    r = solve_power_flow(ieee33, p, q)
    ref = newton_raphson(ieee33, p, q)
    assert r.converged
    assert np.max(np.abs(r.voltages - ref)) <= 1e-5
    # published minimum for this feeder under nominal load
    assert r.voltages.min() == pytest.approx(0.9131, abs=2e-4)
    assert ieee33.bus_ids[int(np.argmin(r.voltages))] == 18


def test_slack_voltage_exact(ieee33):
    p, q = ieee33.base_injection_pu(1.3)
    r = solve_power_flow(ieee33, p, q)
    assert r.voltages[ieee33.index[1]] == ieee33.v_slack


def test_converged_implies_small_mismatch(ieee33):
    p, q = ieee33.base_injection_pu(0.8)
    r = solve_power_flow(ieee33, p, q, tol=1e-8)
    assert r.converged and r.max_mismatch <= 1e-8


def test_nonconvergence_reported(two_bus):
    r = solve_power_flow(two_bus, np.array([0.0, -30.0]), np.array([0.0, -30.0]))
    assert not r.converged
    assert r.iterations == 200


def test_injection_shape_checked(ieee33):
    with pytest.raises(ValueError):
        solve_power_flow(ieee33, np.zeros(32))


def test_monotone_loading_two_bus(two_bus):
    loads = np.linspace(0.0, 1.5, 16)
    v = [solve_power_flow(two_bus, np.array([0.0, -x]), np.array([0.0, -0.5 * x])).voltages[1] for x in loads]
    assert np.all(np.diff(v) < 0)


def test_determinism(ieee33):
    rng = np.random.default_rng(3)
    p, q = -rng.uniform(0, 0.05, 33), -rng.uniform(0, 0.03, 33)
    a, b = solve_power_flow(ieee33, p, q), solve_power_flow(ieee33, p, q)
    assert a.voltages.tobytes() == b.voltages.tobytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.1, 1.6))
def test_oracle_equivalence_random_33bus(seed, scale):
    from voltgrid.grid import load_network

    net = load_network("ieee33")
    rng = np.random.default_rng(seed)
    p, q = net.base_injection_pu(scale * rng.uniform(0.5, 1.5, 33))
    p = p + rng.uniform(-0.01, 0.01, 33)  # some buses export
    r = solve_power_flow(net, p, q)
    assert r.converged
    assert np.max(np.abs(r.voltages - newton_raphson(net, p, q))) <= 1e-5
