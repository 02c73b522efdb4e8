"""Exception types raised by the toolkit."""


class TIError(Exception):
    """Base class for numerical failures; the CLI maps these to exit code 3."""


class ZeroGradient(TIError):
    pass


class NegativeDiscriminant(TIError):
    def __init__(self, message, x=None, xi=None):
        super().__init__(message)
        self.x = x
        self.xi = xi


class DiscriminantTooSmall(TIError):
    pass


class ConformalPoint(TIError):
    """Metric is a multiple of g0: the axis span is undefined."""

    def __init__(self, alpha):
        super().__init__(f"conformal point: alpha = beta = {alpha:.12g}")
        self.alpha = alpha


class TangencyError(TIError):
    pass


class DiscriminantHit(TIError):
    pass


class MaxTimeExceeded(TIError):
    pass


class SingularHessian(TIError):
    pass


class NoConvergence(TIError):
    pass


class SegmentInadmissible(TIError):
    pass


class BranchFailure(TIError):
    pass


class NonpositiveNu(TIError):
    pass


class FitFailure(TIError):
    pass


class RankDeficiency(TIError):
    pass


class ConfigError(Exception):
    """Invalid experiment or material configuration (CLI exit code 2)."""

    def __init__(self, field, message):
        super().__init__(f"{field}: {message}")
        self.field = field


class EmptyRowWarning(UserWarning):
    pass
