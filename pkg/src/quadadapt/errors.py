"""Exception hierarchy shared by every module."""


class QuadAdaptError(Exception):
    """Base class for all library errors."""


class ShapeMismatch(QuadAdaptError, ValueError):
    pass


class NonFinite(QuadAdaptError, FloatingPointError):
    pass


class EvenKernel(QuadAdaptError, ValueError):
    pass


class ClassOutOfRange(QuadAdaptError, ValueError):
    pass


class NotScalarRoot(QuadAdaptError, ValueError):
    pass


class DetachedTensor(QuadAdaptError, RuntimeError):
    pass


class EmptyMask(QuadAdaptError, ValueError):
    pass


class InvalidConfig(QuadAdaptError, ValueError):
    pass


class UnknownAttachPoint(QuadAdaptError, KeyError):
    def __str__(self):  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class WidthMismatch(QuadAdaptError, ValueError):
    pass


class FrozenParameterError(QuadAdaptError, RuntimeError):
    pass


class ManifestMismatch(QuadAdaptError, ValueError):
    pass


class CorruptBlob(QuadAdaptError, ValueError):
    pass


class ChecksumMismatch(CorruptBlob):
    pass


class SingularSystem(QuadAdaptError, ArithmeticError):
    pass


class TargetUnreached(QuadAdaptError, RuntimeError):
    pass


class Diverged(NonFinite):
    """Training loss became NaN/Inf; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
