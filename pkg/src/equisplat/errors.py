"""Exception types raised across the package."""


class EquisplatError(Exception):
    """Base class for all package errors."""


# camera
class ZeroRadius(EquisplatError, ValueError):
    pass


class PoleDegenerate(EquisplatError, ValueError):
    pass


class OutOfBounds(EquisplatError, ValueError):
    pass


class BehindCamera(EquisplatError, ValueError):
    pass


class InvalidPose(EquisplatError, ValueError):
    pass


# scene
class EmptyPointCloud(EquisplatError, ValueError):
    pass


# gradients
class StateMismatch(EquisplatError, ValueError):
    pass


# trainer
class DimensionMismatch(EquisplatError, ValueError):
    pass


# dataio
class ParseError(EquisplatError, ValueError):
    """Malformed input file. ``str(err)`` carries file/line/field context."""


class ValidationError(EquisplatError, ValueError):
    pass


class UnsupportedFormat(EquisplatError, ValueError):
    pass


class MissingProperty(EquisplatError, KeyError):
    def __init__(self, name: str):
        super().__init__(name)
        self.name = name

    def __str__(self) -> str:
        return f"missing property {self.name!r}"


class VersionMismatch(EquisplatError, ValueError):
    pass


class DecodeError(EquisplatError, ValueError):
    pass


# cli
class EmptySplit(EquisplatError, ValueError):
    pass
