"""Exception hierarchy shared by the pipeleak modules."""


class PipeleakError(Exception):
    """Base class for all package errors."""


class DomainError(PipeleakError, ValueError):
    """A physical parameter or model argument is outside its valid range."""


class ContractError(PipeleakError, ValueError):
    """Array shapes or channel layouts do not match what the model expects."""


class ConvergenceError(PipeleakError, RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class SingularLinearizationError(PipeleakError, ValueError):
    """Linearization requested at a leaking node with zero head."""


class DivergenceError(PipeleakError, RuntimeError):
    """A trajectory became non-finite during integration."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class UndefinedRatioError(PipeleakError, ValueError):
    """Frequency-response bin whose input amplitude is numerically zero."""


class FilterDivergenceError(PipeleakError, RuntimeError):
    """The Riccati covariance lost positive definiteness."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


class InfeasibleThetaError(DomainError):
    """The identification model cannot be built at this parameter vector."""


class StallError(PipeleakError, RuntimeError):
    """Every line search failed; ``result`` carries the best iterate found."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class TotalFailureError(PipeleakError, RuntimeError):
    """No start of a multistart run produced a usable estimate."""
