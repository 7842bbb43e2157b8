"""Exception hierarchy shared across the package.

Every error carries a ``category`` used by the CLI to pick an exit code:
config (bad arguments / infeasible settings), data (files, pairing,
formats), numeric (non-finite or degenerate values at runtime).
"""


class TmktError(Exception):
    category = "config"


class ConfigError(TmktError):
    category = "config"


class DomainError(ConfigError):
    """An argument is outside its mathematical domain."""


class InfeasibleRatioError(DomainError):
    """The requested mixup ratio cannot be met in the chosen mode."""


class DataError(TmktError):
    category = "data"


class FormatError(DataError):
    """A sequence or checkpoint file failed structural validation."""


class PairingError(DataError):
    """Static/event sequences cannot be paired (shape or label mismatch)."""


class NumericError(TmktError):
    category = "numeric"


class DegenerateFeaturesError(NumericError):
    """Zero-variance features make CKA undefined (0/0)."""
