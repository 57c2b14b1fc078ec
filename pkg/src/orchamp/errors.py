"""Exception and warning types shared across the package."""


class OrchAMPError(Exception):
    """Base class for all package errors."""


class DataError(OrchAMPError):
    """Bad or unreadable input data (CLI exit code 3)."""


class NumericalError(OrchAMPError):
    """A numerical precondition failed at run time (CLI exit code 4)."""


class ParseError(DataError):
    pass


class EmptyInput(DataError):
    pass


class DomainError(DataError):
    pass


class SchemaError(DataError):
    pass


class VersionError(DataError):
    pass


class ConfigError(DataError):
    pass


class ArgError(OrchAMPError, ValueError):
    """Invalid argument passed to a library function."""


class RankError(NumericalError):
    pass


class SingularError(NumericalError):
    pass


class FitError(NumericalError):
    pass


class SubcriticalError(NumericalError):
    """A spike lies below the detection edge.

    ``component`` is the zero-based index of the offending coordinate and
    ``modality`` is filled in by callers that know it.
    """

    def __init__(self, component, message=None, modality=None):
        self.component = component
        self.modality = modality
        if message is None:
            message = f"component {component} is below the spectral detection edge; reduce the rank"
        if modality is not None:
            message = f"modality {modality!r}: {message}"
        super().__init__(message)


class DivergenceError(NumericalError):
    def __init__(self, iteration, modality, message=None):
        self.iteration = iteration
        self.modality = modality
        super().__init__(
            message or f"non-finite values at iteration {iteration} in modality {modality!r}"
        )


class DegeneracyWarning(UserWarning):
    """Repeated singular values, identical responsibilities, and similar ties."""
