"""Exception types shared across the solver modules."""

from __future__ import annotations


class DomainError(ValueError):
    """An argument lies outside the domain where an operation is defined."""


class NumericalError(RuntimeError):
    """A numerical routine failed (singular solve, stalled root finder, ...).

    ``state`` carries whatever context the failing routine could attach,
    for instance the last bracket of a root search.
    """

    def __init__(self, message: str, state: dict | None = None):
        super().__init__(message)
        self.state = dict(state or {})


class NonConvergenceError(NumericalError):
    """An outer fixed-point iteration hit its iteration cap."""

    def __init__(self, message: str, residual_history, state: dict | None = None):
        super().__init__(message, state)
        self.residual_history = list(residual_history)


class ConfigError(ValueError):
    """A scenario configuration could not be parsed or validated."""
