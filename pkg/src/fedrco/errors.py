"""Exception hierarchy shared across the package."""


class FedRCOError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(FedRCOError, ValueError):
    pass


class NonSquare(ShapeMismatch):
    pass


class AsymmetricInput(FedRCOError, ValueError):
    pass


class FactorizationFailure(FedRCOError, ArithmeticError):
    """M + rho*I was not numerically positive definite."""


class KernelLargerThanInput(ShapeMismatch):
    pass


class LabelOutOfRange(FedRCOError, ValueError):
    pass


class EmptyDataset(FedRCOError, ValueError):
    pass


class DegenerateTrace(FedRCOError, ArithmeticError):
    """The gradient-covariance trace vanished, so the pi-correction is undefined."""


class InversesNotReady(FedRCOError, RuntimeError):
    pass


class ZeroGradient(FedRCOError, ValueError):
    pass


class TooFewSamples(FedRCOError, ValueError):
    pass


class InfeasibleAssignment(FedRCOError, ValueError):
    pass


class ConfigInvalid(FedRCOError, ValueError):
    """Raised with a dotted field path, e.g. ``kfac.t_inv: must be >= 1``."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)
