"""
Broadcast graph node: hands the aggregator's duals to the lossy channel on global ticks.
"""

import logging
from typing import Any, Dict

from src.state import ChannelModel, LoopState
from src.tools.channel_tools import LossyBroadcastChannel

logger = logging.getLogger(__name__)


class BroadcastChannel:
    """Graph node wrapping one LossyBroadcastChannel for the length of a run."""

    def __init__(self, model: ChannelModel):
        self.channel = LossyBroadcastChannel(model)

    def __call__(self, state: LoopState) -> Dict[str, Any]:
        k = state["global_step"]
        delivered = self.channel.attempt_broadcast(k)
        events = []
        if not delivered.all():
            events.append(f"broadcast {k}: lost at DER(s) {[int(i) for i in (~delivered).nonzero()[0]]}")
        return {"delivered": delivered, "events": events}
