"""Exception taxonomy shared across the package.

Every error raised on purpose derives from PhyslocError so callers (and the
CLI exit-code mapping) can tell deliberate rejections apart from bugs.
"""


class PhyslocError(Exception):
    """Base class for all deliberate errors raised by this package."""


class DimensionError(PhyslocError):
    """Shapes or sizes incompatible with the requested operation."""


class DomainError(PhyslocError):
    """A numeric argument outside its mathematical domain (e.g. tau <= 0)."""


class DegenerateInputError(PhyslocError):
    """Input that is structurally valid but has no defined result (zero vector, empty text)."""


class ContractError(PhyslocError):
    """An API contract violation (non-scalar loss, tape misuse)."""


class NumericError(PhyslocError):
    """A non-finite value appeared where finite arithmetic was required."""


class FormatError(PhyslocError):
    """Malformed serialized data (bad magic, bad header)."""


class UnsupportedFormatError(FormatError):
    """Well-formed but out-of-scope serialized data (e.g. 16-bit images)."""


class TruncatedDataError(FormatError):
    """Serialized data shorter than its header promises."""


class ValidationError(PhyslocError):
    """A record or argument with out-of-range or inconsistent values."""


class ParseError(ValidationError):
    """A record that could not be parsed; message carries the line number."""


class ConfigError(PhyslocError):
    """Configuration inconsistent with an artifact or with other configuration."""


class CorruptionError(PhyslocError):
    """An artifact whose content hash does not match its payload."""


class DataError(PhyslocError):
    """Referenced data is missing or unusable (unknown id, unreadable file)."""
