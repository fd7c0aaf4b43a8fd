"""Shared error types."""


class OperationCancelled(RuntimeError):
    """Raised inside long-running operations when a cancel check fires."""
