"""Exception classes shared across the package.

Each class carries an ``exit_code`` used by the command line front end.
"""


class QGCNError(Exception):
    exit_code = 1


class UsageError(QGCNError):
    exit_code = 2


class DataError(QGCNError):
    exit_code = 3


class NumericError(QGCNError):
    exit_code = 4


class IOFailure(QGCNError):
    exit_code = 5


# topology validation
class TopologyError(DataError):
    pass


class TopologyParseError(TopologyError):
    pass


class CycleDetected(TopologyError):
    pass


class DisconnectedJoint(TopologyError):
    pass


class NonPositiveBoneLength(TopologyError):
    pass


class NonInvolutiveSymmetry(TopologyError):
    pass


class TopologyMismatch(DataError):
    pass


# kinematics
class DegenerateBone(DataError):
    pass


class DegenerateBone2D(DataError):
    pass


class ParallelReference(DataError):
    pass


class DegenerateFrame(DataError):
    pass


# tensors / training
class ShapeMismatch(NumericError):
    def __init__(self, msg, *shapes):
        if shapes:
            msg = f"{msg}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(msg)


class NaNLoss(NumericError):
    pass


# dataset IO
class FormatError(DataError):
    pass


class MagicMismatch(FormatError):
    pass


class UnsupportedVersion(FormatError):
    pass


class TruncatedPayload(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class UnknownJoint(DataError):
    pass


class MissingFrames(DataError):
    pass


class BadCell(DataError):
    pass
