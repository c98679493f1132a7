"""
Lossy aggregator-to-DER broadcast.
"""

import logging
from typing import Dict

import numpy as np

from src.exceptions import BoundViolationError
from src.state import ChannelModel

logger = logging.getLogger(__name__)


class LossyBroadcastChannel:
    """
    Bernoulli packet losses with forced delivery after E_i consecutive failures.

    Draws for broadcast k come from a generator seeded with (seed, k), so a bitmap
    depends only on the seed, k and the failure counters.
    """

    def __init__(self, model: ChannelModel):
        self.model = model
        self.failures = np.zeros(model.size, dtype=np.int64)
        self.attempts = 0
        self.losses = np.zeros(model.size, dtype=np.int64)
        self.longest_outage = np.zeros(model.size, dtype=np.int64)

    def attempt_broadcast(self, k: int) -> np.ndarray:
        """
        Attempt to deliver the duals of global step ``k`` to every DER.

        Returns:
            Boolean delivery bitmap, one entry per DER
        """
        rng = np.random.default_rng([self.model.seed, k])
        draws = rng.random(self.model.size)
        delivered = draws >= self.model.loss_prob
        forced = ~delivered & (self.failures >= self.model.staleness_cap)
        if np.any(forced):
            logger.debug(f"Broadcast {k}: forced delivery to DER(s) {np.flatnonzero(forced).tolist()}")
        delivered |= forced

        self.failures = np.where(delivered, 0, self.failures + 1)
        if np.any(self.failures > self.model.staleness_cap):
            raise BoundViolationError("consecutive losses exceeded the staleness cap")
        self.attempts += 1
        self.losses += ~delivered
        self.longest_outage = np.maximum(self.longest_outage, self.failures)
        return delivered

    def statistics(self) -> Dict[str, np.ndarray]:
        """Empirical loss rate and longest outage per DER."""
        rate = self.losses / max(self.attempts, 1)
        return {"loss_rate": rate, "longest_outage": self.longest_outage.copy()}
