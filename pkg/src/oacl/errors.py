"""Exception types shared across the library."""


class DimensionError(ValueError):
    """Incompatible matrix shapes."""


class ContractError(ValueError):
    """A call violated a documented precondition."""


class ProtocolError(RuntimeError):
    """Task lifecycle misuse (begin/end ordering, frozen-state violations)."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown config key."""


class DataError(ValueError):
    """Malformed dataset contents (labels out of range, empty splits)."""


class GenerationError(RuntimeError):
    """Synthetic data generation could not satisfy its constraints."""


class PretrainingError(RuntimeError):
    """Backbone pretraining failed to reach the minimum accuracy floor."""


class NumericalError(RuntimeError):
    """Non-finite values encountered during optimization."""
