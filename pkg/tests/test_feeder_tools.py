"""Feeder file parsing."""

import numpy as np
import pytest

from src.exceptions import FeederParseError
from src.tools.feeder_tools import FeederParser

PV_NODES = [
    "742", "704", "720", "707", "727", "729", "709", "775", "732",
    "734", "710", "735", "736", "737", "738", "711", "741", "740",
]


def test_bundled_feeder_layout(ieee37_feeder) -> None:
    feeder = ieee37_feeder
    assert feeder.n_nodes == 36
    assert feeder.node_names[0] == "799"
    assert len(feeder.branches) == 36
    assert [feeder.node_names[n] for n in feeder.der_nodes] == PV_NODES
    assert feeder.monitored == list(range(1, 37))
    assert feeder.index_of("741") == 35
    assert feeder.slack_magnitude == pytest.approx(1.02)


def test_bundled_feeder_ratings(ieee37_feeder) -> None:
    ratings_kva = ieee37_feeder.ratings * ieee37_feeder.base_kva
    expected = np.full(18, 200.0)
    expected[2] = 300.0
    expected[14] = expected[15] = 350.0
    np.testing.assert_allclose(ratings_kva, expected)


def test_loads_are_converted_to_per_unit(three_node_feeder) -> None:
    np.testing.assert_allclose(three_node_feeder.nominal_load_p, [0.1, 0.0])
    np.testing.assert_allclose(three_node_feeder.nominal_load_q, [0.02, 0.0])
    assert three_node_feeder.der_units[0].rating == pytest.approx(0.4)


def test_bundled_total_load(ieee37_feeder) -> None:
    total_kw = ieee37_feeder.nominal_load_p.sum() * ieee37_feeder.base_kva
    assert total_kw == pytest.approx(2457.0)


def test_monitor_subset() -> None:
    text = """\
base kva=100 kv=1
slack node=s
node name=s
node name=a
node name=b
line from=s to=a r=0.1 x=0.1
line from=a to=b r=0.1 x=0.1
monitor nodes=b
"""
    feeder = FeederParser.parse_text(text)
    assert feeder.monitored == [2]
    assert feeder.der_units == []


@pytest.mark.parametrize(
    "text, line, fragment",
    [
        ("base kva=1 kv=1\nslack node=s\nnode name=s\nwire from=s to=a\n", 4, "unknown record kind"),
        ("base kva=1 kv=1\nslack node=s\nnode name=s\nnode name=a\nline from=s to=a r=0.1\n", 5, "missing x"),
        ("base kva=1 kv=1\nslack node=s\nnode name=s\nnode name=s\n", 4, "already declared"),
        ("base kva=1 kv=1\nslack node=s\nnode name=s\nline from=s to=zz r=1 x=1\n", 4, "unknown node 'zz'"),
        ("base kva=1 kv=1\nslack node=s\nnode name=s\nnode name=a\nline from=s to=a r=abc x=1\n", 5, "not a number"),
        ("base kva=1 kv=1\nslack node=s\nnode name=s\nnode name=a\nder node=a kva=0\n", 5, "must be positive"),
        ("base kva=1 kv=1\nslack node=s\nnode name=s\nnode name=a\nline from=s to=a r=1 x=1 color=red\n", 5,
         "unknown field"),
    ],
)
def test_errors_name_the_line(text: str, line: int, fragment: str) -> None:
    with pytest.raises(FeederParseError) as info:
        FeederParser.parse_text(text, source="bad.txt")
    assert info.value.line == line
    assert info.value.path == "bad.txt"
    assert fragment in str(info.value)


def test_slack_must_be_first_node() -> None:
    text = "base kva=1 kv=1\nslack node=s\nnode name=a\nnode name=s\nline from=s to=a r=1 x=1\n"
    with pytest.raises(FeederParseError, match="first declared node"):
        FeederParser.parse_text(text)


def test_missing_file(tmp_path) -> None:
    with pytest.raises(FeederParseError, match="cannot read"):
        FeederParser.parse_file(tmp_path / "absent.txt")
