"""Exception hierarchy shared by all meshnet modules."""


class MeshNetError(Exception):
    pass


class ShapeMismatch(MeshNetError, ValueError):
    pass


class InvalidConfig(MeshNetError, ValueError):
    pass


class OutOfBounds(MeshNetError, IndexError):
    pass


class BadMagic(MeshNetError, ValueError):
    pass


class UnsupportedVersion(MeshNetError, ValueError):
    pass


class TruncatedFile(MeshNetError, ValueError):
    pass


class InvalidProbability(MeshNetError, ValueError):
    pass


class NonDivisibleDims(MeshNetError, ValueError):
    pass


class InvalidVariant(MeshNetError, ValueError):
    pass


class SubvolumeTooLarge(MeshNetError, ValueError):
    pass


class ClassOutOfRange(MeshNetError, ValueError):
    pass


class NonFiniteLoss(MeshNetError, FloatingPointError):
    pass


class PlanMismatch(MeshNetError, ValueError):
    pass


class EmptyAccumulator(MeshNetError, ValueError):
    pass


class UndefinedMetric(MeshNetError, ArithmeticError):
    """A metric whose denominator is zero; callers report it as absent."""
