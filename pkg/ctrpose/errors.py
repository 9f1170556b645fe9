"""
Module: errors.py
Description:
    Exception hierarchy shared by every ctrpose module and mapped to CLI exit codes.

Usage:
    Imported by other modules; not intended to be executed directly.

Notes:
    ValidationError subclasses map to exit status 1, ComputationError subclasses to 2.
"""


class CtrposeError(Exception):
    """Base class for all ctrpose failures."""


class ValidationError(CtrposeError):
    """Inputs violate a documented precondition."""


class ComputationError(CtrposeError):
    """A numerical routine could not produce a trustworthy result."""


# === Validation ===
class InvalidPoseError(ValidationError):
    pass


class InvalidRobotError(ValidationError):
    pass


class JointLimitError(ValidationError):
    pass


class TooFewPointsError(ValidationError):
    pass


class UnknownSceneError(ValidationError):
    pass


class ShapeMismatchError(ValidationError):
    pass


class EmptyPointsError(ValidationError):
    pass


class EmptyInputError(ValidationError):
    pass


# === Computation ===
class BehindCameraError(ComputationError):
    pass


class NonFiniteError(ComputationError):
    pass


class DivergedError(ComputationError):
    pass


class SingularHessianError(ComputationError):
    pass


class EmptyFrustumError(ComputationError):
    pass


class SamplingExhaustedError(ComputationError):
    pass


class UnreachableError(ComputationError):
    pass


class GradientMismatchError(ComputationError):
    """An analytic pullback disagrees with finite differences beyond its tolerance."""
