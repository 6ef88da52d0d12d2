"""Exception types shared across the package."""


class EwaldMPError(Exception):
    """Base class for all errors raised by this package."""


class DegenerateCellError(EwaldMPError):
    """Supercell basis is singular, left-handed, or numerically degenerate."""


class ShapeError(EwaldMPError):
    """Array arguments have incompatible shapes."""


class FilterModeError(EwaldMPError):
    """Filter bank applied to a frequency set of an incompatible mode."""


class NonNeutralCellError(EwaldMPError):
    """Periodic Coulomb sums require a charge-neutral cell."""


class EmptyBatchError(EwaldMPError):
    """Loss or statistics requested over an empty batch."""


class PackingError(EwaldMPError):
    """Random structure generation could not satisfy the separation constraint."""


class TrainingDivergedError(EwaldMPError):
    """Loss became non-finite during optimisation."""


class StructureParseError(EwaldMPError):
    """Structure file does not conform to the documented format."""


class ConfigError(EwaldMPError):
    """Run configuration contains unknown keys or malformed values."""


class ConvergenceError(EwaldMPError):
    """An iterated sum failed to converge within its shell budget."""


class RankDeficientFitError(EwaldMPError):
    """Offset fit design matrix is rank deficient; names the redundant columns."""
