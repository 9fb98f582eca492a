"""Exception types shared across the package."""


class FatpanelError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(FatpanelError, ValueError):
    """A configuration object or argument is malformed."""


class PanelFormatError(FatpanelError, ValueError):
    """Input data cannot be parsed into a panel or violates the schema."""


class RankDeficiencyError(FatpanelError, ValueError):
    """A design matrix is numerically rank deficient on the given window."""


class EstimationError(FatpanelError, RuntimeError):
    """An estimator cannot produce a result on the given panel."""
