"""Shared exception types."""


class InvalidInputError(ValueError):
    """Input violates an operation's preconditions."""


class EmptyObservationsError(RuntimeError):
    """No observations available; callers should fall back to a zero residual."""


class SingularSystemError(RuntimeError):
    """Linear system is singular (e.g. duplicate control points)."""

    def __init__(self, message, indices=None):
        super().__init__(message)
        self.indices = indices if indices is not None else []


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt, truncated, or of an unsupported version."""
