"""Closed-loop runs: interleaving, channel semantics, causality and the headline behaviours."""

import numpy as np
import pandas as pd
import pytest

from src.exceptions import PowerFlowDivergedError
from src.graph import ClosedLoopSimulator
from src.utils.scenario_loader import ScenarioLoader
from tests.conftest import SCENARIOS, THREE_NODE_FEEDER


def _simulator(scenario_file, updates=None) -> ClosedLoopSimulator:
    return ClosedLoopSimulator(ScenarioLoader.load(scenario_file(updates)))


def _setpoints(result) -> np.ndarray:
    return np.stack([r.setpoints for r in result.records])


def test_runs_are_deterministic(scenario_file) -> None:
    updates = {"channel": {"p_loss": 0.4, "channel_seed": 3}}
    first = _simulator(scenario_file, updates).run("feedback")
    second = _simulator(scenario_file, updates).run("feedback")
    np.testing.assert_array_equal(_setpoints(first), _setpoints(second))
    np.testing.assert_array_equal(first.magnitudes, second.magnitudes)


def test_channel_seed_changes_the_run(scenario_file) -> None:
    simulator = _simulator(scenario_file, {"channel": {"p_loss": 0.4}})
    a = simulator.run("feedback", channel_seed=1)
    b = simulator.run("feedback", channel_seed=2)
    assert not np.array_equal(_setpoints(a), _setpoints(b))


def test_fast_ticks_are_interleaved(scenario_file) -> None:
    result = _simulator(scenario_file, {"series": {"horizon": 6}}).run("feedback-fast")
    assert len(result.records) == 60
    assert result.summary["fast_ratio"] == 10
    flags = [r.is_global for r in result.records]
    global_ticks = [i for i, flag in enumerate(flags) if flag]
    assert global_ticks == [0, 10, 20, 30, 40, 50]
    assert [r.global_step for r in result.records[:12]] == [0] * 10 + [1, 1]
    # broadcasts only happen at global ticks
    assert all(r.delivered is None for r in result.records if not r.is_global)
    assert all(r.delivered is not None for r in result.records if r.is_global)


def test_lossless_feedback_on_linear_plant_matches_synchronous(scenario_file) -> None:
    simulator = _simulator(scenario_file, {"powerflow": {"plant": "linear"}, "channel": {"p_loss": 0.0}})
    feedback = simulator.run("feedback")
    synchronous = simulator.run("synchronous")
    np.testing.assert_allclose(_setpoints(feedback), _setpoints(synchronous), rtol=0.0, atol=1e-12)
    for fb, sync in zip(feedback.records, synchronous.records):
        np.testing.assert_allclose(fb.gamma, sync.gamma, rtol=0.0, atol=1e-12)
        np.testing.assert_allclose(fb.mu, sync.mu, rtol=0.0, atol=1e-12)
    assert feedback.summary["max_mismatch"] < 1e-12


def test_staleness_respects_caps(scenario_file) -> None:
    simulator = _simulator(scenario_file, {"channel": {"p_loss": 0.7, "e_max": 2}, "series": {"horizon": 30}})
    slow = simulator.run("feedback")
    assert max(int(r.staleness.max()) for r in slow.records) <= 2
    assert int(np.max(slow.summary["longest_outage"])) <= 2

    fast = simulator.run("feedback-fast")
    assert max(int(r.staleness.max()) for r in fast.records) <= (2 + 1) * 10 - 1


def test_setpoints_do_not_depend_on_future_loads(scenario_file, tmp_path) -> None:
    (tmp_path / "feeder.txt").write_text(THREE_NODE_FEEDER, encoding="utf-8")
    horizon, change = 30, 20
    base = {"p_a": [100.0] * horizon, "p_b": [40.0] * horizon, "q_a": [20.0] * horizon, "q_b": [5.0] * horizon}
    changed = {key: list(values) for key, values in base.items()}
    changed["p_a"][change:] = [600.0] * (horizon - change)
    pd.DataFrame(base).to_csv(tmp_path / "base.csv", index=False)
    pd.DataFrame(changed).to_csv(tmp_path / "changed.csv", index=False)

    def run(load_file: str):
        # the DER node sits above 1.0 pu, so the upper-limit multiplier is active throughout
        path = scenario_file({
            "feeder_file": str(tmp_path / "feeder.txt"),
            "series": {"horizon": horizon, "load_file": load_file},
            "channel": {"p_loss": 0.3, "e_max": 3},
            "controller": {"v_max": 1.0},
        }, name=f"{load_file}.yaml")
        return ClosedLoopSimulator(ScenarioLoader.load(path)).run("feedback")

    a, b = run("base.csv"), run("changed.csv")
    assert max(float(r.mu.max()) for r in a.records if r.global_step < change) > 0.0

    before = [i for i, r in enumerate(a.records) if r.global_step <= change]
    np.testing.assert_array_equal(_setpoints(a)[before], _setpoints(b)[before])
    np.testing.assert_array_equal(
        np.stack([r.mu for r in a.records])[: change], np.stack([r.mu for r in b.records])[: change]
    )

    # the heavier load lowers the measured voltages, the multipliers and then the curtailment
    assert b.records[change].measurements.max() < a.records[change].measurements.max()
    assert not np.array_equal(a.records[change].mu, b.records[change].mu)
    after = [i for i, r in enumerate(a.records) if r.global_step > change + 1]
    assert not np.array_equal(_setpoints(a)[after], _setpoints(b)[after])


def test_voltvar_has_no_broadcast(scenario_file) -> None:
    result = _simulator(scenario_file).run("voltvar")
    assert all(r.delivered is None for r in result.records)
    assert "loss_rate" not in result.summary
    assert result.bounds is None
    # droop never curtails; the setpoint applied at k was chosen at k-1
    p_available = np.asarray(_simulator(scenario_file).scenario.timeline.p_available)
    applied_p = _setpoints(result)[:, :, 0]
    np.testing.assert_allclose(applied_p[0], p_available[0])
    np.testing.assert_allclose(applied_p[1:], p_available[:-1])


def test_divergent_plant_reports_the_tick(scenario_file) -> None:
    simulator = _simulator(scenario_file, {"powerflow": {"tol": 1e-15, "max_iter": 1}})
    with pytest.raises(PowerFlowDivergedError) as info:
        simulator.run("none")
    assert info.value.tick == 0


def test_analysis_produces_tracking_series(scenario_file) -> None:
    simulator = _simulator(scenario_file, {
        "series": {"horizon": 20},
        "controller": {"alpha": "theory", "nu": 5.0, "epsilon": 5.0},
        "analysis": {"enabled": True, "settle_steps": 5},
    })
    result = simulator.run("synchronous")
    assert result.series["tracking_error"].shape == (20,)
    assert len(result.saddle_points) == 20
    assert result.bounds is not None and result.bounds.tracking_guaranteed
    assert result.summary["bound_check"] in {"passed", "failed"}
    assert np.all(result.series["trailing_max"] >= result.series["tracking_error"])

    # the standalone report uses the same oracle drift as the run
    offline = simulator.bounds("synchronous")
    assert offline.sigma_z > 0.0
    assert offline.sigma_z == result.bounds.sigma_z
    assert offline.asymptotic_bound == pytest.approx(result.bounds.asymptotic_bound)


def test_reports_are_written(scenario_file, tmp_path) -> None:
    simulator = _simulator(scenario_file, {"series": {"horizon": 10}})
    result = simulator.run("feedback")
    written = simulator.save_reports(result, str(tmp_path / "reports"))
    names = {path.name for path in written}
    assert {"voltages.csv", "setpoints.csv", "duals.csv", "errors.csv", "costs.csv",
            "bounds.csv", "run_metadata.json"} <= names
    voltages = pd.read_csv(tmp_path / "reports" / "voltages.csv")
    assert len(voltages) == 10
    assert "v_741" in voltages.columns
    duals = pd.read_csv(tmp_path / "reports" / "duals.csv")
    assert "staleness_741" in duals.columns


def test_report_files_are_byte_identical_across_runs(scenario_file, tmp_path) -> None:
    path = scenario_file({"series": {"horizon": 12}, "channel": {"p_loss": 0.4, "channel_seed": 7}})
    first, second = ClosedLoopSimulator(ScenarioLoader.load(path)), ClosedLoopSimulator(ScenarioLoader.load(path))
    written_a = first.save_reports(first.run("feedback"), str(tmp_path / "a"))
    written_b = second.save_reports(second.run("feedback"), str(tmp_path / "b"))
    assert [p.name for p in written_a] == [p.name for p in written_b]
    for a, b in zip(written_a, written_b):
        assert a.read_bytes() == b.read_bytes(), a.name


@pytest.mark.slow
def test_lossless_feedback_matches_synchronous_over_a_thousand_ticks(scenario_file) -> None:
    simulator = _simulator(scenario_file, {
        "powerflow": {"plant": "linear"}, "channel": {"p_loss": 0.0}, "series": {"horizon": 1000},
    })
    feedback = simulator.run("feedback")
    synchronous = simulator.run("synchronous")
    np.testing.assert_allclose(_setpoints(feedback), _setpoints(synchronous), rtol=0.0, atol=1e-12)
    np.testing.assert_allclose(
        np.stack([r.mu for r in feedback.records]), np.stack([r.mu for r in synchronous.records]),
        rtol=0.0, atol=1e-12,
    )


@pytest.fixture(scope="module")
def bundled_runs():
    """Every policy on the bundled regulation scenario, without the oracle."""
    scenario = ScenarioLoader.load(SCENARIOS / "ieee37.yaml", {"analysis.enabled": False})
    simulator = ClosedLoopSimulator(scenario)
    return {policy: simulator.run(policy) for policy in ("none", "voltvar", "feedback", "feedback-fast")}


@pytest.mark.slow
def test_voltvar_leaves_overvoltage_and_feedback_removes_it(bundled_runs) -> None:
    assert bundled_runs["none"].summary["max_voltage_after_burn_in"] > 1.05
    assert bundled_runs["voltvar"].summary["max_voltage_after_burn_in"] > 1.055
    assert bundled_runs["feedback"].summary["max_voltage_after_burn_in"] <= 1.055
    assert bundled_runs["feedback-fast"].summary["max_voltage_after_burn_in"] <= 1.055


@pytest.mark.slow
def test_fast_local_updates_smooth_the_trace(bundled_runs) -> None:
    fast = bundled_runs["feedback-fast"].summary["mean_abs_step_trace"]
    assert fast < bundled_runs["feedback"].summary["mean_abs_step_trace"]


@pytest.mark.slow
def test_cost_ordering_across_policies(bundled_runs) -> None:
    voltvar = bundled_runs["voltvar"].summary["mean_cost_after_settle"]
    feedback = bundled_runs["feedback"].summary["mean_cost_after_settle"]
    fast = bundled_runs["feedback-fast"].summary["mean_cost_after_settle"]
    assert feedback < voltvar
    assert fast >= feedback


@pytest.fixture(scope="module")
def tracking_simulator():
    return ClosedLoopSimulator(ScenarioLoader.load(SCENARIOS / "tracking.yaml"))


@pytest.mark.slow
@pytest.mark.parametrize("p_loss", [0.0, 0.3])
def test_tracking_error_stays_within_the_asymptotic_bound(tracking_simulator, p_loss) -> None:
    result = tracking_simulator.run(p_loss=p_loss)
    assert result.bounds.tracking_guaranteed
    assert result.summary["bound_check"] == "passed"
    assert result.summary["empirical_limsup"] <= result.bounds.asymptotic_bound
    # the overvoltage multipliers are active, so losses reach the setpoints
    assert max(float(r.mu.max()) for r in result.records) > 0.0
    stale = max(float(r.stale_gradient_error.max()) for r in result.records)
    if p_loss > 0.0:
        assert stale > 0.0
    else:
        assert stale == 0.0


@pytest.mark.slow
def test_tracking_degrades_with_loss_probability() -> None:
    scenario = ScenarioLoader.load(
        SCENARIOS / "tracking.yaml", {"powerflow.plant": "linear", "series.horizon": 300}
    )
    frame = ClosedLoopSimulator(scenario).sweep([0.0, 0.1, 0.3, 0.5], list(range(10)))
    errors = frame["mean_error"].to_numpy()
    assert np.all(np.diff(errors) >= -1e-9)
    assert errors[-1] > errors[0]
