"""Exception types shared across the package."""


class DiffgateError(Exception):
    """Base class for runtime failures (CLI exit code 3)."""


class ConfigError(DiffgateError, ValueError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class DimensionError(DiffgateError, ValueError):
    pass


class ContractError(DiffgateError, RuntimeError):
    """An operation was called in a state where it is not defined."""


class SpecError(ConfigError):
    """A synthetic data spec that cannot be realized."""


class MaskFormatError(DiffgateError):
    pass


class IncompatibleMaskError(DiffgateError):
    def __init__(self, expected: str, found: str):
        super().__init__(f"config hash mismatch: expected {expected}, found {found}")
        self.expected = expected
        self.found = found


class TrainingError(DiffgateError):
    pass


class MetricError(DiffgateError, ValueError):
    pass
