import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from certdispatch.grid import (
    CaseFormatError,
    branch_incidence,
    compute_ptdf,
    dump_case,
    grid_from_dict,
    load_case,
    parse_case,
)


def two_bus_doc(**over):
    doc = {
        "buses": [1, 2],
        "branches": [{"from_bus": 1, "to_bus": 2, "x": 1.0, "f_lower": -6, "f_upper": 6}],
        "generators": [{"bus": 1, "cost": 1.0, "p_lower": 0, "p_upper": 10}],
        "loads": [{"bus": 2, "pd_ref": 5.0}],
        "slack": 1,
        "penalty_M": 150000,
    }
    doc.update(over)
    return doc


def ring3():
    return grid_from_dict({
        "buses": [1, 2, 3],
        "branches": [
            {"from_bus": 1, "to_bus": 2, "x": 1.0, "f_lower": -9, "f_upper": 9},
            {"from_bus": 2, "to_bus": 3, "x": 1.0, "f_lower": -9, "f_upper": 9},
            {"from_bus": 1, "to_bus": 3, "x": 1.0, "f_lower": -9, "f_upper": 9},
        ],
        "generators": [{"bus": 1, "cost": 1.0, "p_lower": 0, "p_upper": 10}],
        "loads": [{"bus": 3, "pd_ref": 1.0}],
        "slack": 1,
        "penalty_M": 100,
    })


def write(tmp_path, doc):
    p = tmp_path / "case.json"
    p.write_text(json.dumps(doc))
    return p


def test_minimal_case_sizes(tmp_path):
    g = parse_case(write(tmp_path, two_bus_doc()))
    assert (g.n_buses, g.n_branches, g.n_generators, g.n_loads) == (2, 1, 1, 1)
    assert g.penalty == 150000


def test_self_loop_rejected(tmp_path):
    doc = two_bus_doc(branches=[{"from_bus": 2, "to_bus": 2, "x": 1, "f_lower": -1, "f_upper": 1},
                                {"from_bus": 1, "to_bus": 2, "x": 1, "f_lower": -1, "f_upper": 1}])
    with pytest.raises(CaseFormatError, match="self-loop branch"):
        parse_case(write(tmp_path, doc))


def test_inverted_generator_bounds(tmp_path):
    doc = two_bus_doc(generators=[{"bus": 1, "cost": 1, "p_lower": 5, "p_upper": 2}])
    with pytest.raises(CaseFormatError, match="inverted generator bounds"):
        parse_case(write(tmp_path, doc))


@pytest.mark.parametrize("mutation, message", [
    (lambda d: d.pop("slack"), "missing required field"),
    (lambda d: d["branches"][0].update(x=0.0), "reactance"),
    (lambda d: d.update(slack=7), "slack"),
    (lambda d: d.update(penalty_M=0.5), "penalty"),
    (lambda d: d["branches"][0].update(f_lower=9), "flow bounds"),
])
def test_invalid_cases(tmp_path, mutation, message):
    doc = two_bus_doc()
    mutation(doc)
    with pytest.raises(CaseFormatError, match=message):
        parse_case(write(tmp_path, doc))


def test_disconnected_rejected(tmp_path):
    doc = two_bus_doc(buses=[1, 2, 3])
    with pytest.raises(CaseFormatError, match="connected"):
        parse_case(write(tmp_path, doc))


def test_malformed_syntax(tmp_path):
    p = tmp_path / "bad.json"
    p.write_text("{not json")
    with pytest.raises(CaseFormatError):
        parse_case(p)


def test_round_trip(tmp_path, toy):
    dump_case(toy, tmp_path / "t.json")
    again = parse_case(tmp_path / "t.json")
    assert again == toy


def test_ptdf_two_bus():
    g = grid_from_dict(two_bus_doc())
    phi = compute_ptdf(g).phi
    np.testing.assert_allclose(phi, [[0.0, -1.0]])


def test_ptdf_ring_unit_injection():
    ptdf = compute_ptdf(ring3())
    # unit injection at bus 2, withdrawn at the slack
    np.testing.assert_allclose(ptdf.phi[:, 1], [-2 / 3, 1 / 3, -1 / 3], atol=1e-12)
    # independent oracle: solve the DC system with pinned slack angle
    B = np.array([[2, -1, -1], [-1, 2, -1], [-1, -1, 2]], dtype=float)
    p = np.array([-1.0, 1.0, 0.0])
    theta = np.zeros(3)
    theta[1:] = np.linalg.solve(B[1:, 1:], p[1:])
    flows = np.array([theta[0] - theta[1], theta[1] - theta[2], theta[0] - theta[2]])
    np.testing.assert_allclose(ptdf.phi @ p, flows, atol=1e-12)


def test_slack_column_zero(toy):
    ptdf = compute_ptdf(toy)
    slack = toy.buses.index(toy.slack)
    assert np.all(ptdf.phi[:, slack] == 0.0)
    assert np.all(ptdf.a_g.sum(axis=0) == 1)
    assert np.all(ptdf.a_d.sum(axis=0) == 1)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=13, max_size=13))
def test_flow_conservation(toy, values):
    ptdf = compute_ptdf(toy)
    p = np.zeros(toy.n_buses)
    p[1:] = values
    p[0] = -p[1:].sum()
    f = ptdf.phi @ p
    # net outflow at every bus equals its injection
    np.testing.assert_allclose(branch_incidence(toy).T @ f, p, atol=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=28, max_size=28))
def test_ptdf_linearity(toy, values):
    phi = compute_ptdf(toy).phi
    p1, p2 = np.array(values[:14]), np.array(values[14:])
    np.testing.assert_allclose(phi @ (p1 + p2), phi @ p1 + phi @ p2, atol=1e-10)


def test_bundled_toy_loads():
    g = load_case("toy14")
    assert g.n_buses == 14 and g.n_branches == 20 and g.n_generators == 5
