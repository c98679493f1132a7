"""
Writes a run's traces as CSV files plus a JSON metadata file.
"""

import json
import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Union

import numpy as np
import pandas as pd

from src.state import FeederModel, RunResult

logger = logging.getLogger(__name__)


class ReportWriter:
    """One directory per run; column names carry the feeder's node names."""

    def __init__(self, feeder: FeederModel, monitored: List[int]):
        self.feeder = feeder
        self.monitored = list(monitored)
        self.der_names = [feeder.node_names[node] for node in feeder.der_nodes]
        self.monitored_names = [feeder.node_names[node] for node in self.monitored]

    def voltages(self, result: RunResult) -> pd.DataFrame:
        magnitudes = result.magnitudes
        frame = pd.DataFrame(magnitudes, columns=[f"v_{name}" for name in self.feeder.node_names[1:]])
        rows = np.asarray(self.monitored) - 1
        frame.insert(0, "global_step", [r.global_step for r in result.records])
        frame.insert(0, "tick", [r.tick for r in result.records])
        frame["v_max_monitored"] = magnitudes[:, rows].max(axis=1)
        return frame

    def setpoints(self, result: RunResult, p_available: np.ndarray) -> pd.DataFrame:
        rows: List[Dict[str, Any]] = []
        for record in result.records:
            row: Dict[str, Any] = {"tick": record.tick, "global_step": record.global_step}
            for i, name in enumerate(self.der_names):
                row[f"p_{name}"] = record.setpoints[i, 0]
                row[f"q_{name}"] = record.setpoints[i, 1]
                row[f"pav_{name}"] = p_available[record.global_step, i]
            rows.append(row)
        return pd.DataFrame(rows)

    def duals(self, result: RunResult) -> pd.DataFrame:
        rows: List[Dict[str, Any]] = []
        for record in result.records:
            row: Dict[str, Any] = {"tick": record.tick, "global_step": record.global_step}
            row.update({f"gamma_{name}": value for name, value in zip(self.monitored_names, record.gamma)})
            row.update({f"mu_{name}": value for name, value in zip(self.monitored_names, record.mu)})
            row.update({f"staleness_{name}": int(s) for name, s in zip(self.der_names, record.staleness)})
            if record.delivered is not None:
                row.update({f"delivered_{name}": bool(d) for name, d in zip(self.der_names, record.delivered)})
            rows.append(row)
        return pd.DataFrame(rows)

    def errors(self, result: RunResult) -> pd.DataFrame:
        records = result.global_records
        frame = pd.DataFrame({
            "global_step": [r.global_step for r in records],
            "mismatch": [r.mismatch for r in records],
        })
        for key in ("tracking_error", "trailing_max"):
            if key in result.series:
                frame[key] = result.series[key]
        stale = [r.stale_gradient_error for r in records]
        if stale and all(e is not None for e in stale):
            for i, name in enumerate(self.der_names):
                frame[f"stale_gradient_{name}"] = [e[i] for e in stale]
        return frame

    def costs(self, result: RunResult) -> pd.DataFrame:
        cost = result.series.get("cost", np.zeros(0))
        return pd.DataFrame({"global_step": np.arange(len(cost)), "cost": cost})

    def save(self, result: RunResult, p_available: np.ndarray, out_dir: Union[str, Path],
             metadata: Dict[str, Any]) -> List[Path]:
        """
        Write every trace of ``result`` into ``out_dir``.

        Args:
            result: Completed run
            p_available: Horizon x N_G available power used by the run
            out_dir: Target directory, created if needed
            metadata: Scenario description merged into run_metadata.json

        Returns:
            Paths of the written files
        """
        os.makedirs(out_dir, exist_ok=True)
        out = Path(out_dir)
        frames = {
            "voltages.csv": self.voltages(result),
            "setpoints.csv": self.setpoints(result, p_available),
            "duals.csv": self.duals(result),
            "errors.csv": self.errors(result),
            "costs.csv": self.costs(result),
        }
        if result.bounds is not None:
            frames["bounds.csv"] = pd.DataFrame([result.bounds.flat()])

        written = []
        for name, frame in frames.items():
            path = out / name
            frame.to_csv(path, index=False)
            written.append(path)

        meta_path = out / "run_metadata.json"
        with open(meta_path, "w", encoding="utf-8") as f:
            json.dump({**metadata, "policy": result.policy, "summary": result.summary},
                      f, indent=2, default=_jsonable)
        written.append(meta_path)
        logger.info(f"Wrote {len(written)} files to {out}")
        return written


def _jsonable(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return str(value)
