"""Admittance assembly, linearization and constraint offsets."""

import numpy as np
import pytest

from src.exceptions import DegenerateEdgeError, InputError, ModelConstructionError
from src.tools.feeder_tools import FeederParser
from src.tools.network_tools import NetworkModeler
from src.tools.powerflow_tools import ZBusPowerFlow, assemble_injections


def test_two_node_admittance_and_sensitivities(two_node_feeder) -> None:
    adm = NetworkModeler.build_admittance(two_node_feeder)
    y = 1.0 / complex(0.3, 0.3)
    np.testing.assert_allclose(adm.y, [[y]])
    np.testing.assert_allclose(adm.y_bar, [-y])

    lin = NetworkModeler.build_linear_model(adm, 1.0, der_nodes=[1])
    np.testing.assert_allclose(lin.no_load, [1.0])
    np.testing.assert_allclose(lin.h_sens, [[complex(0.3, 0.3)]])
    np.testing.assert_allclose(lin.r_check, [[0.3]])
    np.testing.assert_allclose(lin.b_check, [[0.3]])
    assert lin.sensitivity_norms[0] == pytest.approx(np.hypot(0.3, 0.3))


def test_disconnected_feeder_is_rejected() -> None:
    text = """\
base kva=1 kv=1
slack node=s
node name=s
node name=a
node name=b
line from=s to=a r=0.1 x=0.1
"""
    feeder = FeederParser.parse_text(text)
    with pytest.raises(ModelConstructionError, match="disconnected"):
        NetworkModeler.build_admittance(feeder)


def test_zero_impedance_is_rejected() -> None:
    text = "base kva=1 kv=1\nslack node=s\nnode name=s\nnode name=a\nline from=s to=a r=0 x=0\n"
    feeder = FeederParser.parse_text(text)
    with pytest.raises(DegenerateEdgeError):
        NetworkModeler.build_admittance(feeder)


def test_feeder_graph_is_a_tree(ieee37_feeder) -> None:
    graph = NetworkModeler.feeder_graph(ieee37_feeder)
    assert graph.number_of_nodes() == 37
    assert graph.number_of_edges() == 36


def test_linear_model_matches_power_flow_for_small_injections(ieee37_feeder) -> None:
    adm = NetworkModeler.build_admittance(ieee37_feeder)
    v0 = ieee37_feeder.slack_voltage
    lin = NetworkModeler.build_linear_model(adm, v0, der_nodes=ieee37_feeder.der_nodes)
    flow = ZBusPowerFlow(adm, v0)

    rng = np.random.default_rng(3)
    p = -0.001 * rng.random(36)
    q = -0.0005 * rng.random(36)
    inj = assemble_injections(36, [], np.zeros((0, 2)), -p, -q)
    exact = flow.solve(inj).magnitudes
    predicted = lin.predict(p, q)
    assert np.max(np.abs(exact - predicted)) < 1e-4


def test_linear_model_stays_within_a_percent_for_moderate_injections(ieee37_feeder) -> None:
    adm = NetworkModeler.build_admittance(ieee37_feeder)
    v0 = ieee37_feeder.slack_voltage
    lin = NetworkModeler.build_linear_model(adm, v0, der_nodes=ieee37_feeder.der_nodes)
    flow = ZBusPowerFlow(adm, v0)

    rng = np.random.default_rng(5)
    for _ in range(10):
        p = rng.uniform(-0.05, 0.05, 36)
        q = rng.uniform(-0.05, 0.05, 36)
        inj = assemble_injections(36, [], np.zeros((0, 2)), -p, -q)
        exact = flow.solve(inj).magnitudes
        assert np.max(np.abs(exact - lin.predict(p, q))) <= 0.01


def test_admittance_is_symmetric(ieee37_feeder) -> None:
    adm = NetworkModeler.build_admittance(ieee37_feeder)
    np.testing.assert_array_equal(adm.y, adm.y.T)


def test_offsets_from_vectors_and_mapping(three_node_feeder) -> None:
    adm = NetworkModeler.build_admittance(three_node_feeder)
    lin = NetworkModeler.build_linear_model(adm, 1.0, der_nodes=three_node_feeder.der_nodes)
    vectors = (three_node_feeder.nominal_load_p, three_node_feeder.nominal_load_q)
    c_vec = NetworkModeler.constraint_offsets(lin, vectors)
    c_map = NetworkModeler.constraint_offsets(lin, {1: (0.1, 0.02)})
    np.testing.assert_allclose(c_vec, c_map)
    expected = lin.a_offset - lin.r_sens[:, 0] * 0.1 - lin.b_sens[:, 0] * 0.02
    np.testing.assert_allclose(c_vec, expected)


def test_offsets_require_every_non_der_load(three_node_feeder) -> None:
    adm = NetworkModeler.build_admittance(three_node_feeder)
    lin = NetworkModeler.build_linear_model(adm, 1.0, der_nodes=three_node_feeder.der_nodes)
    with pytest.raises(InputError, match="non-DER nodes \\[1\\]"):
        NetworkModeler.constraint_offsets(lin, {2: (0.0, 0.0)})
    with pytest.raises(InputError):
        NetworkModeler.constraint_offsets(lin, (np.zeros(3), np.zeros(3)))
