"""Exception types raised across the package."""


class GtddpError(Exception):
    """Base class for all package errors."""


class ShapeError(GtddpError, ValueError):
    """Array arguments have inconsistent dimensions."""


class ConditioningError(GtddpError):
    """Kernel matrix could not be factorized even with maximal jitter."""

    def __init__(self, msg, dim=None):
        super().__init__(msg)
        self.dim = dim


class InitializationError(GtddpError):
    """Optimizer started from a point with non-finite objective."""


class InsufficientDataError(GtddpError, ValueError):
    pass


class KinematicSingularityError(GtddpError):
    """Euler-rate map is (nearly) singular at the requested attitude."""

    def __init__(self, msg, angle=None):
        super().__init__(msg)
        self.angle = angle


class EvaluationError(GtddpError):
    """Dynamics produced non-finite values."""


class NonSaddleError(GtddpError):
    """Q-expansion fails the saddle conditions after maximal regularization."""

    def __init__(self, msg, knot=None, eigenvalues=None):
        super().__init__(msg)
        self.knot = knot
        self.eigenvalues = eigenvalues
        self.result = None


class DivergenceError(GtddpError):
    """Backward value propagation or a simulation produced non-finite values."""

    def __init__(self, msg, knot=None, run=None):
        super().__init__(msg)
        self.knot = knot
        self.run = run


class RolloutDivergenceError(DivergenceError):
    """Forward rollout left the finite range; caller should shrink the step."""


class StalledError(GtddpError):
    """No line-search step decreased the cost and regularization is exhausted.

    The best iterate found so far is kept on the exception.
    """

    def __init__(self, msg, result=None):
        super().__init__(msg)
        self.result = result


class ConfigError(GtddpError, ValueError):
    pass


class ParseError(GtddpError, ValueError):
    """Malformed artifact file; ``line`` is 1-based when known."""

    def __init__(self, msg, path=None, line=None):
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + msg)
        self.path = path
        self.line = line
