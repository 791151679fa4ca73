"""Exception hierarchy shared by every component."""


class ElasticPFError(Exception):
    """Base class for all errors raised by this package."""


class InvalidEnsembleError(ElasticPFError, ValueError):
    pass


class ShapeError(ElasticPFError, ValueError):
    pass


class NumericError(ElasticPFError, ArithmeticError):
    pass


class NumericDivergenceError(NumericError):
    """A propagated state became non-finite."""


class DegenerateEnsembleError(ElasticPFError, ValueError):
    """All particle weights are zero; the posterior is undefined."""


class InvalidMultisetError(ElasticPFError, ValueError):
    pass


class ConfigError(ElasticPFError, ValueError):
    pass


# particle store

class StoreError(ElasticPFError):
    pass


class CacheFullError(StoreError):
    pass


class StagingError(StoreError, OSError):
    pass


class StateNotFoundError(StoreError, FileNotFoundError):
    pass


class ChecksumError(StoreError):
    """A state file failed its CRC-32 verification."""


class StateFormatError(StoreError):
    pass


# protocol

class ProtocolError(ElasticPFError):
    """Violation of the runner/server protocol contract."""


class ProtocolViolation(ProtocolError):
    pass


class FrameError(ProtocolError):
    pass


class VersionError(ProtocolError):
    pass


class DecodeError(ProtocolError):
    pass


class CheckpointError(ElasticPFError):
    pass


class TraceError(ElasticPFError):
    pass


class UndefinedMetricError(ElasticPFError, ValueError):
    pass
