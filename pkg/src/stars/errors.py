"""Exception types shared across the package."""


class StarsError(Exception):
    pass


class ParameterError(StarsError, ValueError):
    """An argument is outside the operation's admissible range."""


class ContractViolation(StarsError, ValueError):
    """Inputs do not satisfy an operation's shape or structural contract."""


class DegenerateVarianceError(ContractViolation):
    pass


class TapeStateError(StarsError, RuntimeError):
    pass


class OracleFailure(StarsError, RuntimeError):
    pass


class ConfigError(StarsError, ValueError):
    pass


class UnsupportedVariantError(StarsError, ValueError):
    pass


class ParseError(StarsError, ValueError):
    pass


class ValidationError(StarsError, ValueError):
    pass


class TrainingAbort(StarsError, RuntimeError):
    """Raised when a loss component becomes non-finite."""

    def __init__(self, component: str, batch=None):
        where = f" (batch {batch})" if batch is not None else ""
        super().__init__(f"non-finite value in loss component '{component}'{where}")
        self.component = component
        self.batch = batch


class IncompatibleCheckpoint(StarsError, ValueError):
    pass
