"""Barcode-stamped exam pipeline: generate, split, merge, grade."""

__version__ = "0.1.0"

from .errors import ExamflowError

__all__ = ["ExamflowError", "__version__"]
