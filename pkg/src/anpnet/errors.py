"""Exception types shared across the package."""


class AnpNetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AnpNetError):
    """Tensor extents are invalid or incompatible for an operation."""


class ParameterError(AnpNetError):
    """A hyperparameter or argument is outside its legal range."""


class FormatError(AnpNetError):
    """A file (weights, manifest, vocabulary, image) is malformed."""


class DataError(AnpNetError):
    """Dataset-level problem: empty split, missing annotations, all records bad."""


class ConfigurationError(AnpNetError):
    """Mismatched components, e.g. vocabulary size vs. model class count."""


class NumericError(AnpNetError):
    """Training produced a non-finite loss."""
