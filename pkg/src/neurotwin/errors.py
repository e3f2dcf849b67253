"""Exception types shared across the neurotwin package."""


class NeurotwinError(Exception):
    """Base class for all package-specific errors."""


class InvalidSpecError(NeurotwinError, ValueError):
    """A configuration or synthesis spec violates its invariants."""


class InvalidInputError(NeurotwinError, ValueError):
    """An input value is outside the operation's domain."""


class ShapeError(NeurotwinError, ValueError):
    """Mismatched or non-conforming array shapes."""


class InvalidBandError(NeurotwinError, ValueError):
    """A frequency band lies outside (0, Nyquist)."""


class DivergenceError(NeurotwinError):
    """An adaptive or iterative process diverged.

    Carries the step index at which the guard tripped.
    """

    def __init__(self, message: str, step: int):
        super().__init__(f"{message} (step {step})")
        self.step = step


class DegenerateInputError(NeurotwinError, ValueError):
    """Input is degenerate for the named processing stage (e.g. zero variance)."""

    def __init__(self, message: str, stage: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage


class NumericError(NeurotwinError):
    """A non-finite value appeared during computation; names the location."""

    def __init__(self, message: str, location: str):
        super().__init__(f"{location}: {message}")
        self.location = location


class SingularFitError(NeurotwinError):
    """The least-squares design matrix is rank deficient."""


class DegenerateStatsError(NeurotwinError, ValueError):
    """Too few samples to form the requested statistics."""


class DegenerateDataError(NeurotwinError, ValueError):
    """A training set lacks the variation required to fit a model."""
