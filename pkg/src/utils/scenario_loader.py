"""
Scenario assembly: settings, feeder, linear model, series and channel in one object.
"""

import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ValidationError

from src.config.settings import SimulationSettings
from src.exceptions import ScenarioError
from src.state import (
    ARRAY_MODEL,
    AdmittanceModel,
    ChannelModel,
    CostModel,
    FeederModel,
    LinearModel,
    ProblemInstance,
    RegularizationParams,
    ScenarioTimeline,
)
from src.tools.bounds_tools import BoundsAnalyzer
from src.tools.feeder_tools import FeederParser
from src.tools.network_tools import NetworkModeler
from src.tools.series_tools import SeriesSynthesizer
from src.utils.instance_builder import InstanceBuilder

logger = logging.getLogger(__name__)


class Scenario(BaseModel):
    """A fully resolved scenario, ready for the closed-loop simulator."""
    model_config = ARRAY_MODEL

    settings: SimulationSettings
    feeder: FeederModel
    admittance: AdmittanceModel
    linear: LinearModel
    timeline: ScenarioTimeline
    channel: ChannelModel
    cost: CostModel
    params: RegularizationParams

    @property
    def monitored(self) -> List[int]:
        return self.linear.monitored

    @property
    def der_nodes(self) -> List[int]:
        return self.linear.der_nodes

    @property
    def v0(self) -> complex:
        return self.feeder.slack_voltage

    def instance_builder(self) -> InstanceBuilder:
        controller = self.settings.controller
        return InstanceBuilder(
            self.feeder, self.linear, self.timeline, self.cost, self.params,
            v_min=controller.v_min, v_max=controller.v_max,
        )

    def instances(self) -> List[ProblemInstance]:
        return self.instance_builder().build_all()


class ScenarioLoader:
    """Resolves a SimulationSettings into a Scenario."""

    @staticmethod
    def load(path: Union[str, Path], overrides: Optional[Dict[str, Any]] = None) -> Scenario:
        """Read a YAML scenario (with dotted-key overrides) and resolve it."""
        settings = SimulationSettings.from_yaml(path, overrides)
        return ScenarioLoader.from_settings(settings)

    @staticmethod
    def from_settings(settings: SimulationSettings) -> Scenario:
        """
        Parse the feeder, linearize it and prepare series, channel and parameters.

        Raises:
            ScenarioError: unknown monitored node, bad series files, infeasible or
                oversized capability sets, per-DER channel lists of the wrong length
        """
        feeder = FeederParser.parse_file(settings.resolve(settings.feeder_file))
        monitored = ScenarioLoader._monitored(settings, feeder)
        admittance = NetworkModeler.build_admittance(feeder)
        linear = NetworkModeler.build_linear_model(
            admittance, feeder.slack_voltage, monitored=monitored, der_nodes=feeder.der_nodes
        )

        load_p, load_q, p_available = ScenarioLoader._series(settings, feeder)
        ScenarioLoader._check_capability(feeder, p_available)
        try:
            timeline = ScenarioTimeline(
                horizon=settings.series.horizon,
                tau=settings.controller.tau,
                tau_fast=settings.controller.tau_fast,
                load_p=load_p,
                load_q=load_q,
                p_available=p_available,
                seed=settings.series.seed,
            )
        except ValidationError as e:
            raise ScenarioError(e.errors()[0]["msg"], location="series") from e

        controller = settings.controller
        cost = CostModel(c_p=controller.c_p, c_q=controller.c_q)
        params = RegularizationParams(
            nu=controller.nu, eps=controller.epsilon, alpha=0.0,
            d_gamma=controller.d_gamma, d_mu=controller.d_mu,
        )
        if controller.alpha == "theory":
            first_instance = InstanceBuilder(feeder, linear, timeline, cost, params).build(0)
            alpha = BoundsAnalyzer.theory_stepsize(first_instance)
            logger.info(f"Using the contraction-optimal stepsize alpha = {alpha:.4e}")
        else:
            alpha = float(controller.alpha)
        params = params.model_copy(update={"alpha": alpha})

        scenario = Scenario(
            settings=settings,
            feeder=feeder,
            admittance=admittance,
            linear=linear,
            timeline=timeline,
            channel=ScenarioLoader.channel_model(settings, len(feeder.der_units)),
            cost=cost,
            params=params,
        )
        logger.info(
            f"Scenario '{settings.name}': {feeder.n_nodes} nodes, {len(monitored)} monitored, "
            f"{len(feeder.der_units)} DERs, {timeline.horizon} steps"
        )
        return scenario

    @staticmethod
    def channel_model(
        settings: SimulationSettings,
        n_der: int,
        p_loss: Optional[float] = None,
        seed: Optional[int] = None,
    ) -> ChannelModel:
        """Channel of the scenario, optionally with a uniform loss probability or another seed."""
        channel = settings.channel
        loss = ScenarioLoader._per_der(channel.p_loss if p_loss is None else p_loss, n_der, "channel.p_loss")
        caps = ScenarioLoader._per_der(channel.e_max, n_der, "channel.e_max")
        try:
            return ChannelModel(
                loss_prob=loss,
                staleness_cap=caps,
                seed=channel.channel_seed if seed is None else seed,
            )
        except ValidationError as e:
            raise ScenarioError(e.errors()[0]["msg"], location="channel") from e

    @staticmethod
    def _per_der(value: Union[float, List[float]], n_der: int, where: str) -> np.ndarray:
        if isinstance(value, list):
            if len(value) != n_der:
                raise ScenarioError(f"expected {n_der} entries, got {len(value)}", location=where)
            return np.asarray(value)
        return np.full(n_der, value)

    @staticmethod
    def _monitored(settings: SimulationSettings, feeder: FeederModel) -> List[int]:
        if settings.monitored is None:
            return list(feeder.monitored)
        indices = []
        for name in settings.monitored:
            try:
                index = feeder.index_of(str(name))
            except KeyError:
                raise ScenarioError(f"unknown node '{name}'", location="monitored") from None
            if index == 0:
                raise ScenarioError("the slack node cannot be monitored", location="monitored")
            indices.append(index)
        return indices

    @staticmethod
    def _series(settings: SimulationSettings, feeder: FeederModel) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        params = settings.series
        load_p, load_q, p_available = SeriesSynthesizer.synthesize(
            params, feeder.nominal_load_p, feeder.nominal_load_q, feeder.ratings
        )
        names = feeder.node_names[1:]
        if params.load_file:
            columns = [f"p_{name}" for name in names] + [f"q_{name}" for name in names]
            frame = ScenarioLoader._read_series_file(settings, params.load_file, columns)
            load_p = frame[columns[: len(names)]].to_numpy() / feeder.base_kva
            load_q = frame[columns[len(names):]].to_numpy() / feeder.base_kva
        if params.pv_file:
            columns = [f"pav_{feeder.node_names[node]}" for node in feeder.der_nodes]
            frame = ScenarioLoader._read_series_file(settings, params.pv_file, columns)
            p_available = frame[columns].to_numpy() / feeder.base_kva
        return load_p, load_q, p_available

    @staticmethod
    def _read_series_file(settings: SimulationSettings, name: str, columns: List[str]) -> pd.DataFrame:
        """Read a CSV series in kW/kvar; one row per global step."""
        path = settings.resolve(name)
        try:
            frame = pd.read_csv(path)
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise ScenarioError(f"cannot read series: {e}", location=str(path)) from e
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise ScenarioError(f"missing column(s) {missing}", location=str(path))
        if len(frame) != settings.series.horizon:
            raise ScenarioError(
                f"series has {len(frame)} rows but the horizon is {settings.series.horizon}", location=str(path)
            )
        if frame[columns].isna().any().any():
            raise ScenarioError("series contains empty cells", location=str(path))
        return frame

    @staticmethod
    def _check_capability(feeder: FeederModel, p_available: np.ndarray) -> None:
        ratings = feeder.ratings
        p_min = feeder.p_min
        for k, row in enumerate(p_available):
            too_large = np.flatnonzero(row > ratings * (1.0 + 1e-9))
            if too_large.size:
                node = feeder.node_names[feeder.der_nodes[too_large[0]]]
                raise ScenarioError(f"available power exceeds the rating of DER at node {node}",
                                    location=f"series step {k}")
            empty = np.flatnonzero(p_min > row)
            if empty.size:
                node = feeder.node_names[feeder.der_nodes[empty[0]]]
                raise ScenarioError(f"capability set of DER at node {node} is empty (P_min > P_av)",
                                    location=f"series step {k}")
