"""Exception hierarchy. CLI exit codes hang off ``exit_code``."""


class SnforgeError(Exception):
    exit_code = 1


class ValidationError(SnforgeError, ValueError):
    exit_code = 2


class DimensionError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class TargetIndexError(ValidationError, IndexError):
    pass


class IngestionError(ValidationError):
    pass


class FormatError(ValidationError):
    """Malformed checkpoint, corpus cache or spec file."""


class RejectionFailure(SnforgeError):
    """Bin-constrained resampling ran out of attempts."""

    exit_code = 3

    def __init__(self, attempts: int, lower: int, upper: int):
        super().__init__(f"no candidate within [{lower}, {upper}] after {attempts} attempts")
        self.attempts = attempts
        self.lower = lower
        self.upper = upper


class SearchError(SnforgeError):
    exit_code = 3


class FitnessError(SnforgeError):
    pass


class LossError(SnforgeError):
    exit_code = 4


class DivergenceError(SnforgeError):
    exit_code = 4
