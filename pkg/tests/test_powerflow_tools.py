"""AC power flow, linear plant and voltage sensing."""

import numpy as np
import pytest

from src.exceptions import InputError, PowerFlowDivergedError
from src.state import VoltageSolution
from src.tools.network_tools import NetworkModeler
from src.tools.opf_tools import linear_magnitudes
from src.tools.powerflow_tools import (
    LinearPlant,
    ZBusPowerFlow,
    assemble_injections,
    measure_voltages,
    solve_powerflow,
)


@pytest.fixture
def ieee37_flow(ieee37_feeder):
    adm = NetworkModeler.build_admittance(ieee37_feeder)
    return ZBusPowerFlow(adm, ieee37_feeder.slack_voltage)


def test_zero_injection_returns_no_load_profile(ieee37_flow) -> None:
    inj = assemble_injections(36, [], np.zeros((0, 2)), np.zeros(36), np.zeros(36))
    sol = ieee37_flow.solve(inj)
    assert sol.converged
    assert sol.iterations == 1
    np.testing.assert_allclose(sol.v, ieee37_flow.no_load)


def test_loaded_feeder_meets_tolerance(ieee37_flow, ieee37_feeder) -> None:
    inj = assemble_injections(36, [], np.zeros((0, 2)), ieee37_feeder.nominal_load_p, ieee37_feeder.nominal_load_q)
    sol = ieee37_flow.solve(inj, tol=1e-10)
    assert sol.residual <= 1e-10
    assert ieee37_flow.residual(sol.v, inj.s) <= 1e-10
    assert np.all(sol.magnitudes < 1.02)


def test_scenario_injections_converge_quickly(ieee37_scenario) -> None:
    timeline = ieee37_scenario.timeline
    flow = ZBusPowerFlow(ieee37_scenario.admittance, ieee37_scenario.v0)
    for k in range(timeline.horizon):
        u = np.column_stack([timeline.p_available[k], np.zeros(len(ieee37_scenario.der_nodes))])
        inj = assemble_injections(36, ieee37_scenario.der_nodes, u, timeline.load_p[k], timeline.load_q[k])
        sol = flow.solve(inj, tol=1e-8)
        assert sol.converged
        assert sol.iterations <= 50


def test_rated_pv_at_light_load_overvoltages(ieee37_flow, ieee37_feeder) -> None:
    u = np.column_stack([ieee37_feeder.ratings, np.zeros(len(ieee37_feeder.der_nodes))])
    inj = assemble_injections(
        36, ieee37_feeder.der_nodes, u, 0.35 * ieee37_feeder.nominal_load_p, 0.35 * ieee37_feeder.nominal_load_q
    )
    sol = ieee37_flow.solve(inj, tol=1e-10)
    assert sol.converged
    assert sol.magnitudes.max() > 1.05


def test_two_node_closed_form(two_node_feeder) -> None:
    adm = NetworkModeler.build_admittance(two_node_feeder)
    inj = assemble_injections(1, [1], np.array([[0.3, -0.1]]), np.zeros(1), np.zeros(1))
    sol = solve_powerflow(adm, inj, 1.0, tol=1e-12)
    v = sol.v[0]
    # v = 1 + z conj(s / v) for the single line
    assert v == pytest.approx(1.0 + complex(0.3, 0.3) * np.conj(complex(0.3, -0.1) / v), abs=1e-10)


def test_divergence_reports_residual(two_node_feeder) -> None:
    adm = NetworkModeler.build_admittance(two_node_feeder)
    inj = assemble_injections(1, [], np.zeros((0, 2)), np.array([5.0]), np.array([5.0]))
    with pytest.raises(PowerFlowDivergedError) as info:
        solve_powerflow(adm, inj, 1.0, max_iter=30)
    assert info.value.iterations == 30
    assert info.value.at_tick(7).tick == 7
    assert "tick 7" in str(info.value.at_tick(7))


def test_injection_assembly() -> None:
    inj = assemble_injections(3, [2, 3], np.array([[0.5, 0.1], [0.2, -0.3]]),
                              np.array([0.1, 0.2, 0.0]), np.array([0.05, 0.0, 0.1]))
    np.testing.assert_allclose(inj.p, [-0.1, 0.3, 0.2])
    np.testing.assert_allclose(inj.q, [-0.05, 0.1, -0.4])
    with pytest.raises(InputError):
        assemble_injections(3, [1], np.zeros((1, 2)), np.zeros(2), np.zeros(3))


def test_linear_plant_uses_constraint_arithmetic(make_two_node_instance, two_node_feeder) -> None:
    instance = make_two_node_instance()
    adm = NetworkModeler.build_admittance(two_node_feeder)
    lin = NetworkModeler.build_linear_model(adm, 1.0, der_nodes=[1])
    u = np.array([[0.35, -0.2]])
    inj = assemble_injections(1, [1], u, np.zeros(1), np.zeros(1))
    sol = LinearPlant(lin).solve(inj, instance, u)
    assert sol.magnitudes[0] == linear_magnitudes(instance, u)[0]
    assert sol.magnitudes[0] == pytest.approx(1.0 + 0.3 * 0.35 - 0.3 * 0.2)


def test_measurements_are_bounded_and_seeded() -> None:
    sol = VoltageSolution(v=np.full(4, 1.01 + 0j), magnitudes=np.full(4, 1.01), converged=True,
                          iterations=1, residual=0.0)
    exact = measure_voltages(sol, [4, 1])
    np.testing.assert_array_equal(exact, [1.01, 1.01])

    a = measure_voltages(sol, [1, 2, 3, 4], noise_bound=1e-3, seed=[5, 2])
    b = measure_voltages(sol, [1, 2, 3, 4], noise_bound=1e-3, seed=[5, 2])
    np.testing.assert_array_equal(a, b)
    assert np.all(np.abs(a - 1.01) <= 1e-3)
    with pytest.raises(InputError):
        measure_voltages(sol, [5])
