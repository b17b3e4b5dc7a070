"""Exception hierarchy shared across the package.

Every error raised by sigrot derives from SigrotError so callers (and the CLI)
can map failures to exit codes without matching on message text.
"""

from __future__ import annotations


class SigrotError(Exception):
    """Base class for all sigrot errors."""


class DimensionMismatch(SigrotError):
    """Array shapes are incompatible for the requested operation."""


class NearZeroNorm(SigrotError):
    """A vector that must be normalized has norm <= 1e-12."""


class DomainError(SigrotError):
    """A numeric argument is outside the domain of the operation."""


class EmptyInput(SigrotError):
    """An operation that needs at least one element received none."""


class NonPositiveMarginal(SigrotError):
    """A transport marginal contains a zero or negative entry."""


class NoForwardTape(SigrotError):
    """Backward pass requested but the forward solve recorded no tape."""


class BatchTooSmall(SigrotError):
    """A loss received an empty batch."""


class GraphBatchMismatch(SigrotError):
    """Similarity graph size differs from the batch size."""


class NegativeLambda(SigrotError):
    """Hybrid loss weight must be >= 0."""


class BadK(SigrotError):
    """Recall cutoff K is out of range for the corpus."""


class NonFiniteGradient(SigrotError):
    """An optimizer step received a NaN or infinite gradient."""


class EmptySplit(SigrotError):
    """A dataset split required by the operation has no records."""


class UnknownStrategy(SigrotError):
    """Graph combination strategy name not recognized."""


class UnknownSplit(SigrotError):
    """Split name is not one of train/val/test."""


class ParseError(SigrotError):
    """Malformed text input; carries 1-based line and column when known."""

    def __init__(self, message: str, line: int | None = None, column: int | None = None):
        self.line = line
        self.column = column
        where = ""
        if line is not None:
            where = f"line {line}"
            if column is not None:
                where += f", column {column}"
            where = f" ({where})"
        super().__init__(f"{message}{where}")
