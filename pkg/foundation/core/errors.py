"""
Exception hierarchy for the segmentation pipeline
==================================================

Every failure the pipeline reports is a SegmentationError. The CLI maps them
to exit code 2, the service to HTTP 422.
"""

from typing import Optional


class SegmentationError(Exception):
    """Base class for all pipeline failures"""


class InvalidArgumentError(SegmentationError, ValueError):
    """Argument outside the operation's domain (bad dims, spacing, shapes)"""


class DegenerateInputError(SegmentationError):
    """Input is well-formed but carries no usable information (constant, empty, full)"""


class InsufficientDataError(SegmentationError):
    """Too few samples to build a model or split folds"""


class LocalizationError(SegmentationError):
    """The global probability map never crosses the threshold"""

    def __init__(self, message: str, max_probability: float):
        super().__init__(f"{message} (max probability {max_probability:.4f})")
        self.max_probability = max_probability


class ParseError(SegmentationError):
    """Malformed text file (MetaImage header, config file)"""

    def __init__(self, message: str, line_number: Optional[int] = None, path: Optional[str] = None):
        where = ""
        if path:
            where += f"{path}"
        if line_number is not None:
            where += f":{line_number}"
        super().__init__(f"{where}: {message}" if where else message)
        self.line_number = line_number
        self.path = path


class CorruptFileError(SegmentationError):
    """File body disagrees with its header"""


class ConfigError(ParseError):
    """Unknown or invalid configuration key"""
