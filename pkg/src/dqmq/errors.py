"""Exception hierarchy shared by every module."""


class DQMQError(Exception):
    """Base class for library errors."""


class DimensionError(DQMQError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DQMQError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(DQMQError, ArithmeticError):
    """A computation produced (or would produce) a non-finite value."""


class ConfigError(DQMQError, ValueError):
    """Invalid configuration: unknown keys, bad values, unknown topology."""


class FormatError(DQMQError, ValueError):
    """Malformed on-disk data (e.g. CIFAR binary records)."""

    def __init__(self, message, offset=None):
        super().__init__(message)
        self.offset = offset


class CheckpointError(DQMQError):
    """Base class for checkpoint load failures."""


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedFileError(CheckpointError):
    pass


class PayloadLengthError(CheckpointError):
    """Payload does not match the manifest; ``layer`` names the offending tensor."""

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class ProtocolError(DQMQError):
    """Deployment wire-protocol violation (version mismatch, malformed frame)."""
