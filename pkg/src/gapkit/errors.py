"""Exception hierarchy. The CLI maps each family onto an exit code."""


class GapkitError(Exception):
    exit_code = 1


class ConfigError(GapkitError):
    exit_code = 2


class DataError(GapkitError):
    exit_code = 3


class NumericError(GapkitError):
    exit_code = 4


class BadMagicError(DataError):
    pass


class UnsupportedFormatError(DataError):
    pass


class TruncatedPayloadError(DataError):
    pass


class DimensionMismatchError(DataError):
    pass


class NonFiniteError(DataError):
    pass


class ZeroNormRowError(NumericError):
    """A row had zero Euclidean norm where a direction was required."""

    def __init__(self, row, context="row"):
        self.row = int(row)
        super().__init__(f"{context} {self.row} has zero norm")


class DegenerateSystemError(NumericError):
    pass


class NonFiniteGradientError(NumericError):
    def __init__(self, parameter):
        self.parameter = parameter
        super().__init__(f"non-finite gradient for {parameter}")


class TrainingDivergedError(NumericError):
    """Raised when the loss goes non-finite; carries the last finite state."""

    def __init__(self, step, last_good, log):
        self.step = step
        self.last_good = last_good
        self.log = log
        super().__init__(f"non-finite loss at step {step}")
