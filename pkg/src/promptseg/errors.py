"""Exception hierarchy shared by the pipeline stages and the CLI."""


class PromptSegError(Exception):
    """Base class for all package errors."""


class BackendUnavailableError(PromptSegError):
    """A backend or interactive model could not be constructed or loaded."""


class InvalidImageError(PromptSegError, ValueError):
    pass


class ShapeMismatchError(PromptSegError, ValueError):
    pass


class NonFiniteRelevanceError(PromptSegError, FloatingPointError):
    """Relevance propagation produced NaN or inf."""


class NoSignalError(PromptSegError):
    """Every view of every category was low-confidence."""


class LowConfidenceError(PromptSegError):
    """A relevance channel is all-zero where a usable signal is required."""


class DivergenceError(PromptSegError, FloatingPointError):
    """The clustering optimisation produced a non-finite loss."""


class DatasetNotFoundError(PromptSegError, FileNotFoundError):
    def __init__(self, missing):
        self.missing = [str(m) for m in missing]
        super().__init__("missing dataset files: " + ", ".join(self.missing[:10])
                         + (" ..." if len(self.missing) > 10 else ""))
