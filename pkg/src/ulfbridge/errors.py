"""Exception types raised across the package."""


class UlfBridgeError(Exception):
    """Base class for all package errors."""


class InvalidSchedule(UlfBridgeError, ValueError):
    pass


class InvalidConfig(UlfBridgeError, ValueError):
    pass


class ShapeError(UlfBridgeError, ValueError):
    pass


class StepPastEnd(UlfBridgeError, IndexError):
    pass


class InvalidLevel(UlfBridgeError, IndexError):
    pass


class UndefinedScore(UlfBridgeError, ValueError):
    pass


class EmptyBatch(UlfBridgeError, ValueError):
    pass


class ContaminatedTeacherData(UlfBridgeError, ValueError):
    """Non-target-domain slices were passed to a target-only training routine."""


class FrozenModelError(UlfBridgeError, RuntimeError):
    pass


class ScheduleMismatch(UlfBridgeError, ValueError):
    pass


class LevelMismatch(UlfBridgeError, ValueError):
    pass


class TooSmall(UlfBridgeError, ValueError):
    pass


class TooManyPatches(UlfBridgeError, ValueError):
    pass


class NeedNegatives(UlfBridgeError, ValueError):
    pass


class NeedSamples(UlfBridgeError, ValueError):
    pass


class NumericalError(UlfBridgeError, ArithmeticError):
    pass


class InvalidModel(UlfBridgeError, ValueError):
    pass


class SplitLeakage(UlfBridgeError, ValueError):
    pass


class IncompleteCohort(UlfBridgeError, ValueError):
    pass


class IncompatibleCheckpoint(UlfBridgeError, ValueError):
    pass


class CorruptCheckpoint(UlfBridgeError, ValueError):
    pass


class NaNDetected(UlfBridgeError, FloatingPointError):
    """A loss became non-finite; ``last_checkpoint`` points at the last good state."""

    def __init__(self, message, last_checkpoint=None, step=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
        self.step = step
