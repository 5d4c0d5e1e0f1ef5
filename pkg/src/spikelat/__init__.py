"""spikelat: train and analyze latency-coded spiking networks at desk scale."""

from .errors import (
    ContractError,
    FormatError,
    GraphError,
    NumericsError,
    ShapeError,
    SpecError,
    SpikelatError,
    TrainingAbort,
)

__version__ = "0.1.0"
