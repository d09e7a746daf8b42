"""Exception types shared across the package."""


class DomainError(ValueError):
    """An input lies outside the domain an operation is defined on."""


class ContractError(RuntimeError):
    """A caller broke an API contract (stale tape, mismatched buffers, ...)."""


class NumericError(FloatingPointError):
    """A non-finite value appeared during a computation."""

    def __init__(self, message, where=None):
        super().__init__(message if where is None else f"{message} (at {where})")
        self.where = where


class NumericAbort(RuntimeError):
    """Optimization stopped after repeated non-finite steps or divergence."""


class SamplingError(RuntimeError):
    """Rejection sampling could not produce enough points."""


class ConfigError(ValueError):
    """Invalid or unknown configuration entries."""
