EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG_ERROR = 2
EXIT_DIVERGENCE = 3
EXIT_GUARD_VIOLATION = 4


class UserException(Exception):
    """Invalid experiment configuration or command line."""
    exit_code = EXIT_CONFIG_ERROR


class LssError(Exception):
    """Base of the numerical failures raised by the solver library."""
    exit_code = EXIT_FAILURE


class IntegrationError(LssError):

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class SingularBlockError(LssError):

    def __init__(self, block: int, level: int = 0, message: str = 'Singular diagonal block'):
        super().__init__(f"{message}: block {block} on level {level}")
        self.block = block
        self.level = level


class BreakdownError(LssError):
    """Conjugate gradient met a direction with non-positive curvature."""


class InnerSolveError(LssError):

    def __init__(self, block: int, level: int, residual: float):
        super().__init__(f"Inner block solve did not converge: block {block} on level {level}, "
                         f"relative residual {residual:.3e}")
        self.block = block
        self.level = level
        self.residual = residual


class GuardViolation(LssError):
    """Problem size exceeds what a dense verification routine accepts."""
    exit_code = EXIT_GUARD_VIOLATION


class SolverDivergence(LssError):
    exit_code = EXIT_DIVERGENCE

    def __init__(self, message: str, report=None):
        super().__init__(message)
        self.report = report
