"""
Synthetic load and irradiance profiles at one-second granularity.
"""

import logging
from typing import Tuple

import numpy as np

from src.config.settings import SeriesSettings

logger = logging.getLogger(__name__)


class SeriesSynthesizer:
    """Diurnal base shapes perturbed by bounded random walks; deterministic under the seed."""

    @staticmethod
    def bounded_walk(rng: np.random.Generator, steps: int, width: int, sigma: float, bound: float) -> np.ndarray:
        """Random walk clipped to [-bound, bound], starting at zero (steps x width)."""
        walk = np.zeros((steps, width))
        if sigma == 0.0 or bound == 0.0:
            return walk
        for k in range(1, steps):
            walk[k] = np.clip(walk[k - 1] + sigma * rng.standard_normal(width), -bound, bound)
        return walk

    @staticmethod
    def irradiance_shape(params: SeriesSettings, horizon: int) -> np.ndarray:
        """Clear-sky fraction of DER rating: floor level with a Gaussian midday bump."""
        peak_step = params.peak_step if params.peak_step is not None else 0.58 * horizon
        width = params.peak_width if params.peak_width is not None else 0.15 * horizon
        k = np.arange(horizon)
        bump = np.exp(-0.5 * ((k - peak_step) / max(width, 1e-9)) ** 2)
        return params.irradiance_floor + (params.irradiance_peak - params.irradiance_floor) * bump

    @staticmethod
    def synthesize(
        params: SeriesSettings,
        nominal_p: np.ndarray,
        nominal_q: np.ndarray,
        ratings: np.ndarray,
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        Generate loads and available DER power over ``params.horizon`` steps.

        Args:
            params: Generator parameters (scales, walk sizes, irradiance shape, seed)
            nominal_p: Nominal real load per non-slack node (pu)
            nominal_q: Nominal reactive load per non-slack node (pu)
            ratings: DER ratings S_i (pu)

        Returns:
            (load_p, load_q, p_available) with shapes (H, N), (H, N), (H, N_G)
        """
        horizon = params.horizon
        rng = np.random.default_rng(params.seed)
        n = nominal_p.shape[0]

        t = np.arange(horizon) / max(horizon - 1, 1)
        diurnal = params.load_scale * (1.0 + params.load_diurnal_amplitude * np.sin(np.pi * t))
        load_walk = SeriesSynthesizer.bounded_walk(
            rng, horizon, n, params.load_walk_sigma, params.load_walk_bound
        )
        factor = np.maximum(diurnal[:, None] * (1.0 + load_walk), 0.0)
        load_p = factor * nominal_p[None, :]
        load_q = factor * nominal_q[None, :]

        clouds = SeriesSynthesizer.bounded_walk(
            rng, horizon, ratings.shape[0], params.cloud_walk_sigma, params.cloud_walk_bound
        )
        irradiance = np.clip(SeriesSynthesizer.irradiance_shape(params, horizon)[:, None] + clouds, 0.0, 1.0)
        p_available = irradiance * ratings[None, :]

        logger.info(
            f"Synthesized {horizon}-step series: peak DER power {p_available.sum(axis=1).max():.3f} pu, "
            f"peak load {load_p.sum(axis=1).max():.3f} pu"
        )
        return load_p, load_q, p_available
