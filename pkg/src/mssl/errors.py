"""Exception types shared across the package."""


class MsslError(Exception):
    """Base class for all package errors."""


# config
class MissingFile(MsslError):
    pass


class ParseError(MsslError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ValidationError(MsslError):
    def __init__(self, field, reason):
        super().__init__(f"{field}: {reason}")
        self.field = field
        self.reason = reason


class IoError(MsslError):
    pass


# data
class MissingMask(MsslError):
    pass


class UnreadableImage(MsslError):
    pass


class EmptyDataset(MsslError):
    pass


class DegenerateSplit(MsslError):
    pass


class UnknownId(MsslError):
    pass


# model
class UnknownFamily(MsslError):
    pass


class MissingPretrainedWeights(MsslError):
    pass


class ShapeError(MsslError):
    pass


class IncompatibleArchitecture(MsslError):
    pass


# objectives
class NonFiniteInput(MsslError):
    pass


class NonBinaryInput(MsslError):
    pass


class EmptyList(MsslError):
    pass


# momentum / checkpointing
class CorruptCheckpoint(MsslError):
    pass


class VersionMismatch(MsslError):
    pass


# training
class EmptyLabeledSet(MsslError):
    pass


class DivergedLoss(MsslError):
    pass


class EmptyHistory(MsslError):
    pass


class MissingCheckpoint(MsslError):
    pass


# eval
class InconsistentDatasets(MsslError):
    pass
