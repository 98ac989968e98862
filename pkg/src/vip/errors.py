"""Exception types raised across the package."""


class VipError(Exception):
    """Base class for all package errors."""


class DimensionMismatch(VipError, ValueError):
    pass


class DegenerateNorm(VipError, ValueError):
    pass


class NonFiniteGradient(VipError, FloatingPointError):
    pass


class NonFiniteLoss(VipError, FloatingPointError):
    pass


class NonFinite(VipError, FloatingPointError):
    pass


class WrongDomain(VipError, ValueError):
    pass


class EmptyPositives(VipError, ValueError):
    pass


class InsufficientClassData(VipError, ValueError):
    pass


class RobotDataLeak(VipError, ValueError):
    """A robot-domain sample reached demonstrator-only training."""


class NotNormalized(VipError, ValueError):
    pass


class EmptyDataset(VipError, ValueError):
    pass


class KTooLarge(VipError, ValueError):
    pass


class DegenerateMean(VipError, ValueError):
    pass


class CorruptFile(VipError, IOError):
    pass


class VersionMismatch(VipError, IOError):
    pass


class EmptyBatch(VipError, ValueError):
    pass


class MissingEmbedding(VipError, KeyError):
    pass


class FingerprintMismatch(VipError, ValueError):
    pass


class HiddenLabelAccess(VipError, PermissionError):
    """Raised when a label-stripped trajectory view is asked for its task label."""
