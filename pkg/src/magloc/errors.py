"""Exception hierarchy shared across the localization pipeline."""


class MagLocError(Exception):
    """Base class for all package errors."""


class ContractViolation(MagLocError, ValueError):
    """An input broke a documented precondition (non-unit vector, bad length...)."""


class NearFieldValidity(MagLocError):
    """Observation point is too close to a transmitter for the dipole model."""

    def __init__(self, anchor, separation, min_range):
        self.anchor = anchor
        self.separation = separation
        self.min_range = min_range
        super().__init__(
            f"anchor {anchor}: separation {separation:.4f} m below dipole "
            f"validity limit {min_range:.4f} m"
        )


class ConfigError(MagLocError, ValueError):
    """Inconsistent configuration (FDM spacing, Nyquist, layout...)."""


class CalibrationSaturated(MagLocError):
    """A calibration frame was saturated; the coefficients would be biased."""


class DegenerateGeometry(MagLocError):
    """Model voltage at the reference pose is too small to divide by."""


class NoActiveAnchors(MagLocError):
    """Every anchor was excluded from the cost; no fix this cycle."""


class NumericalError(MagLocError, FloatingPointError):
    """Filter state became non-finite or lost positive-definiteness."""


class SensorFault(MagLocError):
    """A sensor reported a physically impossible value."""


class NotLanded(MagLocError):
    """Touchdown metrics requested for a trial without a touchdown event."""
