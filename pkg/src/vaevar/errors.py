"""Typed errors shared across the package."""


class VaevarError(Exception):
    """Base class for all package-specific errors."""


class IntegrationDivergedError(VaevarError):
    """A trajectory produced a non-finite state."""


class TrainingDivergedError(VaevarError):
    """The VAE training loss became non-finite."""


class CostSingularError(VaevarError):
    """The determinant term of the background cost could not be evaluated."""


class FactorizationError(VaevarError):
    """The background covariance could not be factored even after ridging."""


class ModelFormatError(VaevarError):
    """A model file is malformed, truncated, or inconsistent with its use."""


class UnsupportedOperatorError(VaevarError):
    """An operation was asked to invert an observation operator it cannot."""


class ConfigError(VaevarError):
    """An experiment configuration is invalid."""
