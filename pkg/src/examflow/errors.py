"""Shared exception base for the examflow pipeline."""


class ExamflowError(Exception):
    """Base class for all errors raised by this package."""
