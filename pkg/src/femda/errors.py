"""Exception types raised across the package."""


class FemdaError(Exception):
    """Base class for all package errors."""


class InvalidDomainError(FemdaError, ValueError):
    pass


class PairingError(FemdaError, ValueError):
    """A coarse cell has no fine-mesh node that can carry its observation."""

    def __init__(self, cell, message=None):
        self.cell = cell
        super().__init__(message or f"coarse cell {cell} contains no fine-mesh node")


class DimensionMismatchError(FemdaError, ValueError):
    pass


class SingularMatrixError(FemdaError, RuntimeError):
    def __init__(self, message, pivot=None):
        self.pivot = pivot
        super().__init__(message)


class ArchiveError(FemdaError, LookupError):
    """Raised for missing, misaligned or incompatible state archives."""
