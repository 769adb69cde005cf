"""Exception hierarchy shared by every module of the package."""


class CSSBLError(Exception):
    """Base class for all package errors."""


class NotPositiveDefinite(CSSBLError, ValueError):
    """A matrix expected to be symmetric positive definite is not."""


class DomainError(CSSBLError, ValueError):
    """An argument lies outside the domain of a special function."""


class EmptyInput(CSSBLError, ValueError):
    pass


class DimensionMismatch(CSSBLError, ValueError):
    pass


class IndexOutOfRange(CSSBLError, IndexError):
    pass


class NonFiniteLogit(CSSBLError, FloatingPointError):
    """A group-assignment logit became NaN or infinite."""


class GroupCountMismatch(CSSBLError, ValueError):
    pass


class DegenerateLabels(CSSBLError, ValueError):
    """ROC analysis needs at least one positive and one negative label."""


class ZeroTruth(CSSBLError, ValueError):
    pass


class ValidationError(CSSBLError, ValueError):
    """Raised when an experiment or scenario description is invalid."""

    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))
