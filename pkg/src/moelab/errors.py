"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid dimensions, scheme names, modes, or config documents."""


class NumericOverflowError(FloatingPointError):
    """A forward/backward field became non-finite; names the field and datum."""

    def __init__(self, field: str, datum: int):
        super().__init__(f"non-finite value in field '{field}' at datum {datum}")
        self.field = field
        self.datum = datum


class DivergenceError(FloatingPointError):
    """A trajectory exceeded the divergence threshold; carries the step index.

    The partial trace recorded up to the offending step is attached as
    ``.trace`` so callers can inspect how the run blew up.
    """

    def __init__(self, step: int, detail: str = "", trace=None):
        msg = f"trajectory diverged at step {step}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.step = step
        self.trace = trace


class StateError(RuntimeError):
    """An operation was called before its prerequisite fields were computed."""


class CapabilityError(RuntimeError):
    """The trace was not recorded with enough detail for the requested check."""


class KernelConditioningError(RuntimeError):
    """Covariance factorization failed even after the maximum jitter."""
