from __future__ import annotations

from typing import Any, Optional


class NscError(Exception):
    """Base class for every error raised by nsc."""


class InvalidParameterError(NscError, ValueError):
    pass


class ShapeError(NscError, ValueError):
    pass


class ConfigurationError(NscError, ValueError):
    pass


class SystemDomainError(NscError, ValueError):
    pass


class InsufficientDataError(NscError, ValueError):
    pass


class BoundInapplicableError(NscError, ValueError):
    def __init__(self, theorem: int, reason: str):
        super().__init__(f"Theorem {theorem} bound inapplicable: {reason}")
        self.theorem = int(theorem)
        self.reason = str(reason)


class EstimationError(NscError):
    pass


class LyapunovInvariantError(NscError):
    def __init__(self, index: int, value: float):
        super().__init__(f"V(x) must be positive away from 0; sample {index} has V={value!r}")
        self.index = int(index)
        self.value = float(value)


class NonFiniteLossError(NscError, FloatingPointError):
    def __init__(self, index: Optional[int], message: str = "loss is not finite"):
        where = "" if index is None else f" (sample {index})"
        super().__init__(message + where)
        self.index = index


class DivergenceError(NscError):
    """A trajectory left the finite region; `partial` keeps the path up to `step`."""

    def __init__(self, step: int, partial: Any = None):
        super().__init__(f"state diverged at step {step}")
        self.step = int(step)
        self.partial = partial
