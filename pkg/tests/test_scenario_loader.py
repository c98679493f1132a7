"""Scenario files: schema, series files, capability checks and environment overrides."""

import numpy as np
import pandas as pd
import pytest

from src.config.settings import SimulationSettings
from src.exceptions import ScenarioError
from src.tools.bounds_tools import BoundsAnalyzer
from src.utils.scenario_loader import ScenarioLoader
from tests.conftest import SCENARIOS, THREE_NODE_FEEDER


@pytest.fixture
def three_node_file(tmp_path):
    def write(text: str = THREE_NODE_FEEDER):
        path = tmp_path / "three_node.txt"
        path.write_text(text, encoding="utf-8")
        return str(path)

    return write


def test_bundled_scenario_resolves() -> None:
    scenario = ScenarioLoader.load(SCENARIOS / "ieee37.yaml", {"series.horizon": 20})
    assert scenario.feeder.n_nodes == 36
    assert len(scenario.der_nodes) == 18
    assert len(scenario.monitored) == 36
    assert scenario.timeline.fast_ratio == 10
    assert scenario.params.alpha == pytest.approx(0.2)
    assert scenario.channel.loss_prob.shape == (18,)
    assert np.all(scenario.channel.staleness_cap == 9)
    assert len(scenario.instances()) == 20


def test_tau_fast_must_divide_tau(scenario_file) -> None:
    path = scenario_file({"controller": {"tau": 1.0, "tau_fast": 0.3}})
    with pytest.raises(ScenarioError, match="does not divide"):
        ScenarioLoader.load(path)


def test_unknown_key_is_rejected(scenario_file) -> None:
    with pytest.raises(ScenarioError, match="controller"):
        ScenarioLoader.load(scenario_file({"controller": {"bogus": 1}}))
    with pytest.raises(ScenarioError):
        ScenarioLoader.load(scenario_file({"bogus": 1}))


def test_unknown_monitored_node(scenario_file) -> None:
    with pytest.raises(ScenarioError, match="unknown node 'nowhere'") as info:
        ScenarioLoader.load(scenario_file({"monitored": ["nowhere"]}))
    assert info.value.location == "monitored"


def test_monitored_subset_by_name(scenario_file) -> None:
    scenario = ScenarioLoader.load(scenario_file({"monitored": ["741", "740"]}))
    names = [scenario.feeder.node_names[i] for i in scenario.monitored]
    assert names == ["741", "740"]


def test_per_der_channel_list_length(scenario_file) -> None:
    with pytest.raises(ScenarioError, match="expected 18 entries") as info:
        ScenarioLoader.load(scenario_file({"channel": {"p_loss": [0.1, 0.2, 0.3]}}))
    assert info.value.location == "channel.p_loss"


def test_load_file_in_kilowatts(scenario_file, three_node_file, tmp_path) -> None:
    horizon = 5
    pd.DataFrame({
        "p_a": [100.0] * horizon, "p_b": [50.0] * horizon,
        "q_a": [20.0] * horizon, "q_b": [10.0] * horizon,
    }).to_csv(tmp_path / "loads.csv", index=False)
    pd.DataFrame({"pav_b": [200.0] * horizon}).to_csv(tmp_path / "pv.csv", index=False)
    path = scenario_file({
        "feeder_file": three_node_file(),
        "series": {"horizon": horizon, "load_file": "loads.csv", "pv_file": "pv.csv"},
        "channel": {"e_max": 2},
    })
    scenario = ScenarioLoader.load(path)
    np.testing.assert_allclose(scenario.timeline.load_p, np.tile([0.1, 0.05], (horizon, 1)))
    np.testing.assert_allclose(scenario.timeline.load_q, np.tile([0.02, 0.01], (horizon, 1)))
    np.testing.assert_allclose(scenario.timeline.p_available, np.full((horizon, 1), 0.2))


def test_missing_series_column_is_named(scenario_file, three_node_file, tmp_path) -> None:
    pd.DataFrame({"p_a": [1.0] * 5, "p_b": [1.0] * 5, "q_a": [1.0] * 5}).to_csv(tmp_path / "loads.csv", index=False)
    path = scenario_file({
        "feeder_file": three_node_file(),
        "series": {"horizon": 5, "load_file": "loads.csv"},
    })
    with pytest.raises(ScenarioError, match="q_b"):
        ScenarioLoader.load(path)


def test_series_row_count_must_match_horizon(scenario_file, three_node_file, tmp_path) -> None:
    pd.DataFrame({"pav_b": [100.0] * 3}).to_csv(tmp_path / "pv.csv", index=False)
    path = scenario_file({
        "feeder_file": three_node_file(),
        "series": {"horizon": 5, "pv_file": "pv.csv"},
    })
    with pytest.raises(ScenarioError, match="3 rows but the horizon is 5"):
        ScenarioLoader.load(path)


def test_available_power_above_rating(scenario_file, three_node_file, tmp_path) -> None:
    pd.DataFrame({"pav_b": [100.0, 500.0]}).to_csv(tmp_path / "pv.csv", index=False)
    path = scenario_file({
        "feeder_file": three_node_file(),
        "series": {"horizon": 2, "pv_file": "pv.csv"},
    })
    with pytest.raises(ScenarioError, match="exceeds the rating") as info:
        ScenarioLoader.load(path)
    assert info.value.location == "series step 1"


def test_empty_capability_set(scenario_file, three_node_file) -> None:
    feeder = THREE_NODE_FEEDER.replace("der node=b kva=400", "der node=b kva=400 pmin_kw=300")
    # synthetic irradiance never reaches 75 % of the rating at the first step
    path = scenario_file({"feeder_file": three_node_file(feeder), "series": {"horizon": 5}})
    with pytest.raises(ScenarioError, match="P_min > P_av"):
        ScenarioLoader.load(path)


def test_theory_stepsize(scenario_file) -> None:
    path = scenario_file({"controller": {"alpha": "theory", "nu": 5.0, "epsilon": 5.0}})
    scenario = ScenarioLoader.load(path)
    base_instance = scenario.instances()[0]
    assert scenario.params.alpha == pytest.approx(BoundsAnalyzer.theory_stepsize(base_instance))
    assert 0.0 < scenario.params.alpha < BoundsAnalyzer.compute_constants([base_instance], np.zeros(18)).alpha_max


def test_environment_override(scenario_file, monkeypatch) -> None:
    monkeypatch.setenv("OPF_CONTROLLER__NU", "0.5")
    settings = SimulationSettings.from_yaml(scenario_file())
    assert settings.controller.nu == pytest.approx(0.5)


def test_yaml_takes_precedence_over_environment(scenario_file, monkeypatch) -> None:
    monkeypatch.setenv("OPF_CONTROLLER__NU", "0.5")
    settings = SimulationSettings.from_yaml(scenario_file({"controller": {"nu": 0.2}}))
    assert settings.controller.nu == pytest.approx(0.2)


def test_cli_override_wins(scenario_file) -> None:
    settings = SimulationSettings.from_yaml(
        scenario_file({"controller": {"policy": "feedback"}}), {"controller.policy": "voltvar", "series.seed": None}
    )
    assert settings.controller.policy == "voltvar"
    assert settings.series.seed == 0


def test_unreadable_yaml(tmp_path) -> None:
    path = tmp_path / "broken.yaml"
    path.write_text("name: [unclosed\n", encoding="utf-8")
    with pytest.raises(ScenarioError):
        SimulationSettings.from_yaml(path)
