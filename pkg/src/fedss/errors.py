"""Exception taxonomy shared across the package."""


class ContractViolationError(ValueError):
    """An operation was called with arguments that violate its contract."""


class DegenerateInputError(ValueError):
    """Numerically degenerate input, e.g. a vector with vanishing norm."""


class ConfigurationError(ValueError):
    """Invalid or infeasible run configuration."""


class ProtocolViolationError(RuntimeError):
    """A federation message broke the client/server contract."""


class IngestionError(ValueError):
    """Malformed dataset file; the message carries the offending row number."""
