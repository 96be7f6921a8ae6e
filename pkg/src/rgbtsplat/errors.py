"""Exception types raised across the package."""


class SplatError(Exception):
    """Base class for all package errors."""


class InvalidParameterError(SplatError):
    """Non-finite or otherwise unusable Gaussian parameters."""


class DegenerateCovarianceError(SplatError):
    """Covariance matrix is singular or not positive definite."""


class ConfigurationError(SplatError):
    """Inconsistent configuration (degrees, strategy flags, ...)."""


class ModalityMismatchError(SplatError):
    """Requested modality is not carried by the cloud or scene."""


class ShapeMismatchError(SplatError):
    """Array arguments disagree in shape."""


class StateError(SplatError):
    """Missing or stale retained buffers / optimizer state."""


class OracleInvalidError(SplatError):
    """Finite-difference oracle preconditions violated (non-deterministic loss)."""


class UndefinedCoefficientError(SplatError):
    """Regularization coefficient undefined (zero Gaussians in both modalities)."""


class SceneFormatError(SplatError):
    """Malformed scene manifest or image files."""


class CloudFormatError(SplatError):
    """Malformed binary cloud file."""
