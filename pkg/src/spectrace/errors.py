"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class SpectraceError(Exception):
    """Base class for package errors."""


class ConfigError(SpectraceError):
    """Invalid configuration or usage."""


class DataError(SpectraceError):
    """Missing or malformed input data (images, manifests, masks)."""


class FormatError(DataError):
    """A binary artifact (model / feature / response file) failed to parse."""


class NumericalError(SpectraceError):
    """A numerical failure, e.g. non-finite loss during training."""


class DegenerateEmbeddingError(SpectraceError):
    """A zero-norm embedding where cosine similarity is undefined."""
