"""Exception hierarchy shared by every module of the package."""


class KwsError(Exception):
    """Base class for all domain errors raised by lambdakws."""


class DimensionError(KwsError, ValueError):
    pass


class ConfigurationError(KwsError, ValueError):
    pass


class NumericError(KwsError, ArithmeticError):
    pass


class GraphError(KwsError, RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, double backward)."""


class DecodeError(KwsError, ValueError):
    pass


class IngestionError(KwsError, OSError):
    pass


class CheckpointError(KwsError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError):
    pass


class SpecMismatchError(CheckpointError):
    pass
