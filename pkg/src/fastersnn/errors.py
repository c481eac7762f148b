"""Exception hierarchy. Every error raised on purpose derives from FsnnError."""


class FsnnError(Exception):
    pass


# volume io
class VolumeError(FsnnError):
    pass


class ShortBuffer(VolumeError):
    pass


class MalformedHeader(VolumeError):
    pass


class UnsupportedDatatype(VolumeError):
    pass


class VoxelCountMismatch(VolumeError):
    pass


class ClassTooSmall(FsnnError):
    pass


# tensors
class ShapeMismatch(FsnnError, ValueError):
    pass


class NonIntegralOutputExtent(ShapeMismatch):
    pass


class OddSpatialExtent(ShapeMismatch):
    pass


class NotScalarLoss(FsnnError):
    pass


class GraphConsumed(FsnnError):
    pass


class NonBinaryValue(FsnnError, ValueError):
    pass


# model / training
class InvalidConfig(FsnnError, ValueError):
    pass


class VersionMismatch(FsnnError):
    pass


class CorruptCheckpoint(FsnnError):
    pass


class MissingGradient(FsnnError):
    pass


class LabelOutOfRange(FsnnError, ValueError):
    pass


# metrics / efficiency
class EmptyMatrix(FsnnError, ValueError):
    pass


class DegenerateLabels(FsnnError, ValueError):
    pass


class LengthMismatch(FsnnError, ValueError):
    pass


class SparsityOutOfRange(FsnnError, ValueError):
    pass


class BatchNotOne(FsnnError, ValueError):
    pass


class ClockWentBackwards(FsnnError):
    pass


class NonFiniteLoss(FsnnError, ArithmeticError):
    pass


class ManifestError(FsnnError):
    pass
