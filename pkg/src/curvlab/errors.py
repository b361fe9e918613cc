"""Exception hierarchy shared by all curvlab modules."""


class CurvlabError(Exception):
    """Base class for every error raised by curvlab."""


class ShapeMismatch(CurvlabError, ValueError):
    pass


class NonScalarOutput(CurvlabError, ValueError):
    pass


class NonSmoothActivation(CurvlabError, ValueError):
    """A second derivative was requested where the activation has a kink."""


class NonSmoothAtKink(NonSmoothActivation):
    """A first derivative was requested exactly at a piecewise-linear kink."""


class WrongKind(CurvlabError, ValueError):
    pass


class NoConvergence(CurvlabError, RuntimeError):
    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


class NegativeCurvature(CurvlabError, ValueError):
    pass


class ZeroGradient(CurvlabError, ValueError):
    pass


class DegenerateUpper(CurvlabError, ValueError):
    """|g.u| vanishes, so the upper bound is infinite. ``bounds`` keeps the lower bound."""

    def __init__(self, message, bounds=None):
        super().__init__(message)
        self.bounds = bounds


class NotFooled(CurvlabError, RuntimeError):
    pass


class WrongSide(CurvlabError, ValueError):
    pass


class BatchFailed(CurvlabError, RuntimeError):
    pass


class NonFinite(CurvlabError, FloatingPointError):
    pass


class DataEmpty(CurvlabError, ValueError):
    pass


class ParseError(CurvlabError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class UnknownKey(ParseError):
    pass


class BadMagic(CurvlabError, ValueError):
    pass


class TruncatedFile(CurvlabError, ValueError):
    pass


class CountMismatch(CurvlabError, ValueError):
    pass


class BadHeader(CurvlabError, ValueError):
    pass


class SpecMismatch(ShapeMismatch):
    pass


class IoError(CurvlabError, OSError):
    pass
