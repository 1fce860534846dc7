"""Exception hierarchy shared across the package."""


class HybridGCError(Exception):
    """Base class for all package errors."""


class DataValidationError(HybridGCError, ValueError):
    """Raised when input data violate the hybrid-control data model."""


class ConfigError(HybridGCError, ValueError):
    """Raised for incompatible options (e.g. log odds ratio on a continuous outcome)."""


class FitError(HybridGCError, RuntimeError):
    """A model fit could not be completed.

    Attributes:
        model: short label of the model/stratum being fit, for messages.
    """

    def __init__(self, message: str, model: str = ""):
        super().__init__(f"{model}: {message}" if model else message)
        self.model = model


class RankDeficientError(FitError):
    pass


class SeparationError(FitError):
    pass


class ConvergenceError(FitError):
    pass


class EmptyStratumError(FitError):
    pass


class DomainError(HybridGCError, ValueError):
    """A mean lies outside the domain of the effect-measure transform."""


class CalibrationError(HybridGCError, RuntimeError):
    """Scenario calibration is missing or failed to converge."""


class MissingCalibrationError(CalibrationError, ConfigError):
    """A scenario needing calibrated interactions was used without them."""
