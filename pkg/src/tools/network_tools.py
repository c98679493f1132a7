"""
Admittance and linearized voltage models of a feeder.
"""

import logging
from typing import Mapping, Optional, Sequence, Tuple, Union

import networkx as nx
import numpy as np

from src.exceptions import DegenerateEdgeError, InputError, LinearizationError, ModelConstructionError
from src.state import AdmittanceModel, FeederModel, LinearModel

logger = logging.getLogger(__name__)

LoadInput = Union[Tuple[np.ndarray, np.ndarray], Mapping[int, Tuple[float, float]]]


class NetworkModeler:
    """Builds the pi-model admittance and the no-load linearization of a feeder."""

    MAX_CONDITION = 1e12

    @staticmethod
    def feeder_graph(feeder: FeederModel) -> nx.Graph:
        """Undirected topology graph over node indices 0..N."""
        graph = nx.Graph()
        graph.add_nodes_from(range(feeder.n_nodes + 1))
        graph.add_edges_from((br.from_node, br.to_node) for br in feeder.branches)
        return graph

    @staticmethod
    def build_admittance(feeder: FeederModel) -> AdmittanceModel:
        """
        Assemble the bus admittance of the pi-equivalent circuit and split off the slack.

        Args:
            feeder: Parsed feeder

        Returns:
            AdmittanceModel with Y (slack row/column removed) and y_bar (slack column)

        Raises:
            DegenerateEdgeError: a branch has zero series impedance
            ModelConstructionError: the feeder graph is disconnected
        """
        graph = NetworkModeler.feeder_graph(feeder)
        if not nx.is_connected(graph):
            islands = [sorted(c) for c in nx.connected_components(graph) if 0 not in c]
            names = [feeder.node_names[c[0]] for c in islands]
            raise ModelConstructionError(
                f"feeder '{feeder.name}' is disconnected; islands starting at {names}"
            )

        size = feeder.n_nodes + 1
        y_full = np.zeros((size, size), dtype=complex)
        for br in feeder.branches:
            if abs(br.impedance) == 0.0:
                raise DegenerateEdgeError(
                    f"zero impedance between {feeder.node_names[br.from_node]} "
                    f"and {feeder.node_names[br.to_node]}"
                )
            y_series = 1.0 / br.impedance
            half_shunt = br.shunt / 2.0
            m, n = br.from_node, br.to_node
            y_full[m, m] += y_series + half_shunt
            y_full[n, n] += y_series + half_shunt
            y_full[m, n] -= y_series
            y_full[n, m] -= y_series

        return AdmittanceModel(y=y_full[1:, 1:], y_bar=y_full[1:, 0])

    @staticmethod
    def build_linear_model(
        adm: AdmittanceModel,
        v0: complex,
        monitored: Optional[Sequence[int]] = None,
        der_nodes: Optional[Sequence[int]] = None,
    ) -> LinearModel:
        """
        Linearize the power-flow map around the no-load profile w = -Y^-1 y_bar V0.

        First-order expansion of v = w + Y^-1 diag(conj(v))^-1 conj(s) at s = 0 gives
        H = Y^-1 diag(conj(w))^-1 and J = -jH; magnitudes follow through
        d|v| = Re(conj(w)/|w| * dv).

        Args:
            adm: Reduced admittance model
            v0: Slack voltage phasor (pu)
            monitored: Monitored feeder nodes (1..N); defaults to all
            der_nodes: DER feeder nodes (1..N); defaults to none

        Returns:
            LinearModel with the monitored/DER sensitivity slices and per-DER norms
        """
        n = adm.n_nodes
        monitored = list(range(1, n + 1)) if monitored is None else list(monitored)
        der_nodes = [] if der_nodes is None else list(der_nodes)

        try:
            cond = np.linalg.cond(adm.y)
            if not np.isfinite(cond) or cond > NetworkModeler.MAX_CONDITION:
                raise LinearizationError(f"admittance matrix is ill-conditioned (cond={cond:.3e})")
            z_bus = np.linalg.inv(adm.y)
        except np.linalg.LinAlgError as e:
            raise LinearizationError(f"admittance matrix is singular: {e}") from e

        w = -(z_bus @ adm.y_bar) * v0
        if np.any(np.abs(w) == 0.0):
            raise LinearizationError("no-load voltage vanishes at some node")

        h = z_bus / np.conj(w)[None, :]
        j = -1j * h
        phase = np.conj(w) / np.abs(w)
        r = np.real(phase[:, None] * h)
        b = np.real(phase[:, None] * j)

        rows = [node - 1 for node in monitored]
        cols = [node - 1 for node in der_nodes]
        r_check = r[np.ix_(rows, cols)]
        b_check = b[np.ix_(rows, cols)]
        norms = np.array(
            [np.linalg.norm(np.vstack([r_check[:, i], b_check[:, i]]), 2) for i in range(len(cols))]
        )
        logger.debug(f"Linearized {n}-node feeder: max |w|={np.abs(w).max():.4f}, min |w|={np.abs(w).min():.4f}")

        return LinearModel(
            r_sens=r, b_sens=b, h_sens=h, j_sens=j,
            a_offset=np.abs(w), b_offset=w,
            monitored=monitored, der_nodes=der_nodes,
            r_check=r_check, b_check=b_check,
            sensitivity_norms=norms,
        )

    @staticmethod
    def constraint_offsets(lin: LinearModel, loads: LoadInput) -> np.ndarray:
        """
        c_n = a_n - sum over non-DER nodes of (R[n, j] P_l,j + B[n, j] Q_l,j), n monitored.

        Args:
            lin: Linear model
            loads: Either a (P, Q) pair of length-N arrays (DER-node entries ignored) or a
                mapping from feeder node to (P, Q) covering every non-DER node

        Returns:
            Offsets on the monitored set, in monitored order

        Raises:
            InputError: loads missing for some non-DER node, or wrong shapes
        """
        n = lin.n_nodes
        load_p, load_q = NetworkModeler._load_vectors(lin, loads)
        non_der = np.ones(n, dtype=bool)
        non_der[[node - 1 for node in lin.der_nodes]] = False
        missing = non_der & ~(np.isfinite(load_p) & np.isfinite(load_q))
        if np.any(missing):
            raise InputError(f"loads missing at non-DER nodes {(np.flatnonzero(missing) + 1).tolist()}")

        p = np.where(non_der, load_p, 0.0)
        q = np.where(non_der, load_q, 0.0)
        rows = [node - 1 for node in lin.monitored]
        return lin.a_offset[rows] - lin.r_sens[rows] @ p - lin.b_sens[rows] @ q

    @staticmethod
    def _load_vectors(lin: LinearModel, loads: LoadInput) -> Tuple[np.ndarray, np.ndarray]:
        n = lin.n_nodes
        if isinstance(loads, Mapping):
            load_p = np.full(n, np.nan)
            load_q = np.full(n, np.nan)
            for node, (p, q) in loads.items():
                if not 1 <= node <= n:
                    raise InputError(f"load node {node} outside 1..{n}")
                load_p[node - 1] = p
                load_q[node - 1] = q
            return load_p, load_q
        try:
            load_p, load_q = (np.asarray(v, dtype=float) for v in loads)
        except (TypeError, ValueError) as e:
            raise InputError(f"loads must be a (P, Q) pair of vectors: {e}") from e
        if load_p.shape != (n,) or load_q.shape != (n,):
            raise InputError(f"load vectors must have length {n}, got {load_p.shape} and {load_q.shape}")
        return load_p, load_q
