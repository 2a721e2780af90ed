"""Shared exception types."""


class EvoTreeError(Exception):
    """Base class for all library errors."""


class InvalidInputError(EvoTreeError, ValueError):
    """An argument violates a documented precondition."""


class BudgetExceededError(EvoTreeError, RuntimeError):
    """An exact solve would exceed its enumeration budget."""


class OutOfHullError(InvalidInputError):
    """A parameter vector lies outside the evolution space bounds."""


class SpecValidationError(EvoTreeError, ValueError):
    """A robot spec file failed validation.

    Carries enough context (file, path, key) to point at the offending entry.
    """

    def __init__(self, message, *, file=None, path=None, key=None):
        detail = message
        ctx = []
        if file is not None:
            ctx.append(f"file={file}")
        if path is not None:
            ctx.append(f"path={path}")
        if key is not None:
            ctx.append(f"key={key}")
        if ctx:
            detail = f"{message} ({', '.join(ctx)})"
        super().__init__(detail)
        self.file = file
        self.path = path
        self.key = key


class CorrespondenceConflictError(SpecValidationError):
    """Two local ids of one robot map to the same canonical id."""


class DegenerateDirectionError(EvoTreeError, ArithmeticError):
    """The combined step direction vanished; caller must pick a fallback."""


class PhaseFailureError(EvoTreeError, RuntimeError):
    """A training phase diverged (non-finite loss or return)."""


class SimulationError(EvoTreeError, RuntimeError):
    """The simulator received or produced non-finite values."""
