"""Exception hierarchy.

Everything raised on bad input derives from :class:`ValidationError`, which the
command line maps to exit code 1.
"""


class ValidationError(ValueError):
    pass


class ParseError(ValidationError):
    pass


class SingularCamera(ValidationError):
    pass


class BehindCamera(ValidationError):
    pass


class TooFewCameras(ValidationError):
    pass


class DegenerateConfiguration(ValidationError):
    pass


class InvalidSpec(ValidationError):
    pass


class EmptySupport(ValidationError):
    pass


class DegenerateBox(ValidationError):
    pass


class InvertedBox(ValidationError):
    pass


class NonFiniteValue(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class LengthMismatch(ValidationError):
    pass


class EmptyInput(ValidationError):
    pass


class InvalidConfig(ValidationError):
    pass
