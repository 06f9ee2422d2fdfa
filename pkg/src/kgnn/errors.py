"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, data problems
(ParseError, FormatError, MappingError, SamplingError) -> 3, and
NumericalError -> 4. Everything else is a bug and propagates.
"""


class KgnnError(Exception):
    """Base class for all package errors."""


class ConfigError(KgnnError):
    """Invalid configuration value or combination."""


class DimensionError(KgnnError):
    """Tensor shapes incompatible with the requested operation."""


class ContractError(KgnnError):
    """Caller violated an operation precondition."""


class DegenerateVectorError(KgnnError):
    """Vector too close to zero to normalize."""


class TapeLookupError(KgnnError):
    """Node id not found on the tape."""


class NumericalError(KgnnError):
    """Non-finite value produced by a numeric operation."""


class ParseError(KgnnError):
    """Malformed text input; carries a 1-based line number."""

    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class MappingError(KgnnError):
    """Label cannot be resolved to exactly one entity or vector."""


class SamplingError(KgnnError):
    """Requested subset cannot be drawn from the dataset."""


class FormatError(KgnnError):
    """Corrupt or truncated binary artifact."""
