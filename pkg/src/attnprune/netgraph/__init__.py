"""Network graphs: topology, channel bookkeeping, attachment and persistence."""

from .architectures import ARCHITECTURES, GraphBuilder, build_architecture, build_custom
from .graph import (
    INPUT,
    ChannelSource,
    LayerSpec,
    NetworkGraph,
    ResidualSampler,
    attach_attention,
    forward,
    freeze_base,
    unfreeze,
)
from .serialize import dumps, load_model, loads, save_model

__all__ = [
    "ARCHITECTURES",
    "INPUT",
    "ChannelSource",
    "GraphBuilder",
    "LayerSpec",
    "NetworkGraph",
    "ResidualSampler",
    "attach_attention",
    "dumps",
    "load_model",
    "loads",
    "save_model",
    "build_architecture",
    "build_custom",
    "forward",
    "freeze_base",
    "unfreeze",
]
