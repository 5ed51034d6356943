"""Exception hierarchy shared across the library and mapped to CLI exit codes."""


class MxOpalError(Exception):
    """Base class for all library errors."""


class ConfigError(MxOpalError):
    """Invalid configuration or argument values (CLI exit code 1)."""


class TensorFormatError(MxOpalError):
    """Malformed tensor or quantized-tensor files (CLI exit code 2)."""


class BadMagicError(TensorFormatError):
    """File does not start with the expected magic bytes."""


class TruncatedPayloadError(TensorFormatError):
    """File ends before the declared payload is complete."""


class NonFiniteValueError(TensorFormatError):
    """Payload contains NaN or infinity; quantizers are undefined on these."""


class ContractViolationError(MxOpalError):
    """A numerical contract was violated, e.g. accumulator overflow (CLI exit code 3)."""
