"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or precondition on user-supplied settings."""


class DatasetParseError(ValueError):
    """Malformed dataset file. Carries the 1-based line number."""

    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


class ContractViolation(ValueError):
    """An operation was called with inputs outside its contract."""


class PipelineFault(RuntimeError):
    """Runtime inconsistency inside the training pipeline (e.g. stale engine)."""


class NonFiniteError(FloatingPointError):
    """A loss or gradient became NaN/inf."""
