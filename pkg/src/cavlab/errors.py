"""Exception hierarchy shared by every cavlab module."""


class CavlabError(Exception):
    """Base class for all cavlab errors."""

    exit_code = 2


class DataError(CavlabError):
    """Input data violates a schema or a precondition."""

    exit_code = 2


class NumericError(CavlabError):
    """A numerical routine could not produce a valid result."""

    exit_code = 3


class ShapeMismatch(DataError, ValueError):
    pass


class SchemaError(DataError):
    def __init__(self, message, path=None):
        self.path = None if path is None else str(path)
        if path is not None:
            message = f"{message} [{path}]"
        super().__init__(message)


class ZeroVector(NumericError):
    pass


class TrainingDiverged(NumericError):
    pass


class DegeneratePattern(NumericError):
    pass


class DegenerateMasks(DataError):
    pass


class CollinearCavs(NumericError):
    pass


class NonFiniteObjective(NumericError):
    def __init__(self, step):
        self.step = step
        super().__init__(f"objective became non-finite at step {step}")


class InsufficientFalsePositives(DataError):
    def __init__(self, found, required):
        self.found = found
        self.required = required
        super().__init__(
            f"buffer exhausted after collecting {found} of {required} false positives"
        )


class DegenerateSamples(NumericError):
    """Every sample of a metric was undefined (zero attribution or zero change)."""
