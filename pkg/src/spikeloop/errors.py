"""Exception hierarchy shared by all modules.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
RuntimeFailure (and anything else unexpected) -> 3.
"""


class SpikeloopError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SpikeloopError):
    """Invalid configuration, arguments, or contract violation by the caller."""


class DataError(SpikeloopError):
    """Input data files are missing, malformed, or inconsistent."""


class RuntimeFailure(SpikeloopError):
    """A computation failed at run time (tuning, fitting, simulation)."""


class CalibrationError(RuntimeFailure):
    """A neuron/parameter could not be calibrated."""
