"""Exception hierarchy shared by every module.

Each error carries an ``exit_code`` so the CLI can map failures onto its
documented codes (2 for validation problems, 3 for numerical failures).
"""


class UavMocapError(Exception):
    exit_code = 2


class ValidationError(UavMocapError, ValueError):
    exit_code = 2


class NumericalError(UavMocapError, ArithmeticError):
    exit_code = 3


class ShapeMismatch(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DatasetError(ValidationError):
    pass


class MalformedMessage(ValidationError):
    pass


class EmptyBox(ValidationError):
    pass


class SequenceTooShort(ValidationError):
    pass


class EmptySequence(ValidationError):
    pass


class NotARotation(ValidationError):
    pass


class DegenerateRotation(NumericalError):
    pass


class BehindCamera(NumericalError):
    pass


class NonFiniteObjective(NumericalError):
    def __init__(self, message, frame=None):
        super().__init__(message)
        self.frame = frame


class ExchangeTimeout(UavMocapError, TimeoutError):
    exit_code = 3
