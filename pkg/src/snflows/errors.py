"""Exception hierarchy shared across the package."""


class FlowError(Exception):
    """Base class for all errors raised by snflows."""


class DimensionError(FlowError, ValueError):
    """Operand shapes do not conform."""


class SpectralNormError(FlowError, ValueError):
    """The Bjorck precondition ||Q0^T Q0 - I||_2 < 1 does not hold."""

    def __init__(self, norm):
        super().__init__(f"||Q0^T Q0 - I||_2 = {norm:.6g} >= 1; Bjorck iteration may diverge")
        self.norm = norm


class ConvergenceError(FlowError, RuntimeError):
    """An iterative procedure did not reach its tolerance."""

    def __init__(self, message, residual):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


class SingularJacobianError(FlowError, ArithmeticError):
    """A Jacobian determinant is too close to zero to take its log."""


class NonInvertibleError(FlowError, ValueError):
    """Flow parameters violate the invertibility conditions."""


class NumericalError(FlowError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class DivergenceError(FlowError, RuntimeError):
    """Training produced a non-finite objective."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace if trace is not None else []
