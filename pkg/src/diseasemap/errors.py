"""Exception hierarchy; the CLI maps each family to an exit code."""


class DiseaseMapError(Exception):
    exit_code = 1


class InputError(DiseaseMapError, ValueError):
    """Bad or inconsistent input data (exit code 1)."""

    exit_code = 1


class NumericalError(DiseaseMapError, ArithmeticError):
    """Overflow, non-positive-definite Hessian, underflowing weights (exit code 2)."""

    exit_code = 2


class ConvergenceError(DiseaseMapError):
    """Optimizer or sampler did not converge (exit code 3)."""

    exit_code = 3

    def __init__(self, message, diagnostic=None):
        super().__init__(message)
        self.diagnostic = diagnostic
