"""Exception hierarchy shared by all modules."""


class WeightedEnsembleError(Exception):
    """Base class for every error raised by the package."""


class DimensionError(WeightedEnsembleError, ValueError):
    pass


class ShapeError(WeightedEnsembleError, ValueError):
    pass


class InsufficientDataError(WeightedEnsembleError, ValueError):
    pass


class PositivityError(WeightedEnsembleError, ValueError):
    pass


class DomainError(WeightedEnsembleError, ValueError):
    pass


class ResonanceError(WeightedEnsembleError):
    """A small divisor ``n . omega(I)`` vanished inside the audited band."""

    def __init__(self, message, action=None, mode=None, value=None):
        super().__init__(message)
        self.action = action
        self.mode = mode
        self.value = value


class DegeneracyError(WeightedEnsembleError):
    pass


class SmallDivisorError(ResonanceError):
    pass


class DiffeomorphismError(WeightedEnsembleError):
    """Jacobian of the conjugacy is not positive: band or aliasing failure."""


class InversionError(WeightedEnsembleError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class StiffnessError(WeightedEnsembleError):
    pass


class DensityError(WeightedEnsembleError, ValueError):
    pass


class EnvelopeError(WeightedEnsembleError):
    pass


class QuadratureError(WeightedEnsembleError):
    pass


class InsufficientSignalError(WeightedEnsembleError):
    pass


class EstimatorDivergenceError(WeightedEnsembleError):
    pass


class ConfigError(WeightedEnsembleError, ValueError):
    def __init__(self, message, key_path=None):
        super().__init__(f"{key_path}: {message}" if key_path else message)
        self.key_path = key_path
