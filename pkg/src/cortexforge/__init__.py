"""Locally-connected reconstruction-TICA feature learning at desk scale."""

from cortexforge.netcore import (
    NetworkConfig,
    NetworkParams,
    StageConfig,
    StageParams,
    init_network,
    network_forward,
    stage_forward,
)

__version__ = "0.1.0"

__all__ = [
    "NetworkConfig",
    "NetworkParams",
    "StageConfig",
    "StageParams",
    "init_network",
    "network_forward",
    "stage_forward",
]
