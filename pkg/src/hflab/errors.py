"""Exception hierarchy shared across the package."""


class HflabError(Exception):
    """Base class for all package-specific errors."""


class ValidationError(HflabError, ValueError):
    """Invalid user input: malformed matrices, configs, grids."""


class SingularMatrixError(HflabError, ValueError):
    """A matrix that must be invertible (or well-conditioned) is not."""


class BranchCutError(HflabError, ValueError):
    """Principal matrix logarithm requested for a spectrum touching (-inf, 0]."""


class ConditioningError(HflabError, ValueError):
    """A gauge or metric field is too ill-conditioned to trust."""


class StructuralError(HflabError, ValueError):
    """Dimension or shape mismatch between objects that must be compatible."""


class FlowFailure(HflabError, RuntimeError):
    """Time integration could not continue (step cascade exhausted, drift, ...).

    Carries whatever diagnostic payload was available at the point of failure
    in ``diagnostics`` (a dict; may be empty).
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
