"""Design-space exploration and runtime morphing estimates for streaming
FPGA CNN accelerators."""

import logging
import os

from .costmodel import (
    CostEstimate,
    CostModel,
    DeviceProfile,
    LatencyTerms,
    PEAllocation,
    dsp_total,
    estimate,
)
from .dse import ConstraintSet, MogaConfig, MogaExplorer, ParetoFront, explore
from .exceptions import ForgeMorphError
from .morph import (
    AffinePowerModel,
    LayerBlock,
    MorphMode,
    PowerModel,
    depth_mode,
    fit_power_model,
    partition_blocks,
    predict_power,
    width_mode,
)
from .netgraph import LayerKind, LayerSpec, NetworkGraph, parse_network
from .streamsim import simulate_conv_stream, simulate_pool_stream

__version__ = "0.1.0"

_level = os.environ.get("FORGEMORPH_LOG")
if _level and isinstance(logging.getLevelName(_level.upper()), int):
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger(__name__).setLevel(_level.upper())
logging.getLogger(__name__).addHandler(logging.NullHandler())

__all__ = [
    "AffinePowerModel", "ConstraintSet", "CostEstimate", "CostModel", "DeviceProfile",
    "ForgeMorphError", "LatencyTerms", "LayerBlock", "LayerKind", "LayerSpec", "MogaConfig",
    "MogaExplorer", "MorphMode", "NetworkGraph", "PEAllocation", "ParetoFront", "PowerModel",
    "depth_mode", "dsp_total", "estimate", "explore", "fit_power_model", "parse_network",
    "partition_blocks", "predict_power", "simulate_conv_stream", "simulate_pool_stream",
    "width_mode",
]
