"""Shared fixtures: small analytic feeders, the bundled 37-node feeder and scenario files."""

from pathlib import Path
from typing import Callable, Dict, Optional

import numpy as np
import pytest
import yaml

from src.state import CapabilitySet, CostModel, ProblemInstance, RegularizationParams
from src.tools.feeder_tools import FeederParser
from src.tools.network_tools import NetworkModeler
from src.utils.scenario_loader import ScenarioLoader

ROOT = Path(__file__).resolve().parent.parent
SCENARIOS = ROOT / "scenarios"
IEEE37_FEEDER = SCENARIOS / "ieee37_feeder.txt"

TWO_NODE_FEEDER = """\
feeder name=two-node
base kva=1000 kv=4.8
slack node=s v=1.0
node name=s
node name=a
line from=s to=a r=0.3 x=0.3
der node=a kva=500
monitor nodes=a
"""

THREE_NODE_FEEDER = """\
feeder name=three-node
base kva=1000 kv=4.8
slack node=s v=1.0
node name=s
node name=a
node name=b
line from=s to=a r=0.02 x=0.04
line from=a to=b r=0.03 x=0.03
load node=a p_kw=100 q_kvar=20
der node=b kva=400
monitor nodes=all
"""

REGULATION_PARAMS = RegularizationParams(nu=1e-3, eps=1e-4, alpha=0.2)


@pytest.fixture
def two_node_feeder():
    return FeederParser.parse_text(TWO_NODE_FEEDER, source="two-node")


@pytest.fixture
def three_node_feeder():
    return FeederParser.parse_text(THREE_NODE_FEEDER, source="three-node")


@pytest.fixture(scope="session")
def ieee37_feeder():
    return FeederParser.parse_file(IEEE37_FEEDER)


@pytest.fixture
def make_two_node_instance(two_node_feeder) -> Callable[..., ProblemInstance]:
    """Two-node feeder with z = 0.3 + 0.3j, V0 = 1.0, S = 0.5 and no load."""
    adm = NetworkModeler.build_admittance(two_node_feeder)
    lin = NetworkModeler.build_linear_model(adm, two_node_feeder.slack_voltage, der_nodes=[1])

    def build(
        p_av: float = 0.4,
        params: RegularizationParams = REGULATION_PARAMS,
        p_min: float = 0.0,
        k: int = 0,
    ) -> ProblemInstance:
        return ProblemInstance(
            k=k,
            r_check=lin.r_check,
            b_check=lin.b_check,
            c=NetworkModeler.constraint_offsets(lin, (np.zeros(1), np.zeros(1))),
            der_load_p=np.zeros(1),
            der_load_q=np.zeros(1),
            capability=CapabilitySet(p_min=[p_min], p_av=[p_av], rating=[0.5]),
            cost=CostModel(c_p=3.0, c_q=1.0),
            params=params,
        )

    return build


@pytest.fixture
def scenario_file(tmp_path) -> Callable[..., Path]:
    """Write a scenario YAML on the bundled feeder; ``updates`` are nested section dicts."""

    def write(updates: Optional[Dict] = None, name: str = "scenario.yaml") -> Path:
        data: Dict = {
            "name": "test",
            "feeder_file": str(IEEE37_FEEDER),
            "series": {"horizon": 40, "seed": 0},
            "analysis": {"enabled": False, "settle_steps": 10},
            "output": {"out_dir": str(tmp_path / "out")},
        }
        for key, value in (updates or {}).items():
            if isinstance(value, dict):
                data.setdefault(key, {}).update(value)
            else:
                data[key] = value
        path = tmp_path / name
        path.write_text(yaml.safe_dump(data), encoding="utf-8")
        return path

    return write


@pytest.fixture(scope="session")
def ieee37_scenario():
    """The bundled regulation scenario, shortened to 20 global steps."""
    return ScenarioLoader.load(SCENARIOS / "ieee37.yaml", {"series.horizon": 20})
