"""Exception taxonomy shared by every module."""


class NoisyMimError(Exception):
    """Base class for all library errors."""


class DimensionError(NoisyMimError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(NoisyMimError):
    """An input lies outside the documented domain of an operation."""


class ContractError(NoisyMimError):
    """An internal pre/post-condition was violated by the caller."""


class ConfigError(NoisyMimError):
    """A configuration value violates its documented constraints."""


class FormatError(NoisyMimError):
    """A serialized artifact (checkpoint, CIFAR file) is malformed."""


class DataError(NoisyMimError):
    """A dataset violates an assumption (e.g. a class missing from a split)."""


class NumericsError(NoisyMimError):
    """A non-finite value appeared where the pipeline requires finite math."""
