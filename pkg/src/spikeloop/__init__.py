"""spikeloop: train a small ReLU network, map it onto an emulated analog
spiking substrate, and recover accuracy with in-the-loop backpropagation."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, RuntimeFailure, SpikeloopError

__all__ = [
    "ConfigError",
    "DataError",
    "RuntimeFailure",
    "SpikeloopError",
    "__version__",
]
