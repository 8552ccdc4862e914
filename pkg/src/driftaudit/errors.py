"""Shared error base class; concrete errors live beside the code that raises them."""


class DriftAuditError(Exception):
    """Base class for all errors raised by this package."""
