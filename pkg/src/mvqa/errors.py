"""Exception hierarchy shared across the package."""


class MvqaError(Exception):
    """Base class for all package-specific errors."""


class FormatError(MvqaError):
    """A file or byte stream does not conform to its declared format."""


class TruncationError(FormatError):
    """A payload ended before the header-declared length was reached."""


class DimError(MvqaError):
    """Dimensions are inconsistent, out of range, or incompatible."""


class IoError(MvqaError):
    """An underlying read or write failed."""


class ConfigError(MvqaError):
    """A configuration value is invalid or unknown."""


class ParamError(MvqaError):
    """A numeric parameter violates its precondition."""


class NumericError(MvqaError):
    """A computation produced non-finite values."""


class DegenerateError(MvqaError):
    """Input is degenerate for the requested statistic (e.g. zero variance)."""
