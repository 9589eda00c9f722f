"""Exception hierarchy shared across the lab."""


class LabError(Exception):
    """Base class for all errors raised by contrastlab."""

    exit_code = 1


class DimensionError(LabError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(LabError, ValueError):
    """A precondition of an operation was violated."""


class ConfigError(LabError, ValueError):
    """Invalid configuration. Carries every violation found, not just the first."""

    exit_code = 2

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class MissingArtifactError(LabError, FileNotFoundError):
    exit_code = 3


class NumericalError(LabError, FloatingPointError):
    """Training produced a non-finite value."""

    exit_code = 4

    def __init__(self, message, diagnostics=None):
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)


class UndefinedSimilarityError(LabError, ValueError):
    """CKA is undefined for zero-variance inputs."""


class DegenerateInputError(LabError, ValueError):
    pass


class CheckpointError(LabError):
    exit_code = 3


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class DegenerateInputWarning(UserWarning):
    """Emitted when an input is numerically degenerate but a defined fallback applies."""
