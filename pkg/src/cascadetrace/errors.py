"""Shared exception base for the cascadetrace package."""


class CascadeTraceError(Exception):
    """Base class for all errors raised by this package."""
