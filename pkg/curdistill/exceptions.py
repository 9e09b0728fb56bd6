"""
Custom exceptions for the curdistill package
"""

from typing import Optional


class CurDistillError(Exception):
    """Base exception for curdistill package"""
    pass


class DatasetLoadError(CurDistillError):
    """Raised when dataset files are missing or unreadable"""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path


class DataCorruptionError(CurDistillError):
    """Raised when stored data fails an integrity check (labels, checksums)"""
    pass


class FormatError(CurDistillError):
    """Raised when a manifest or blob does not match the documented layout"""
    pass


class ValidationError(CurDistillError):
    """Raised when input validation fails"""
    pass


class ConfigError(CurDistillError):
    """Raised when a configuration value or combination is invalid"""

    def __init__(self, message: str, fields: Optional[dict] = None):
        super().__init__(message)
        self.fields = fields or {}


class ArchitectureError(CurDistillError):
    """Raised for unsupported architectures or mismatched checkpoints"""
    pass


class InsufficientDataError(CurDistillError):
    """Raised when a class has fewer candidate seeds than requested"""

    def __init__(self, message: str, class_id: Optional[int] = None):
        super().__init__(message)
        self.class_id = class_id


class DivergenceError(CurDistillError):
    """Raised when a loss becomes non-finite during optimization"""

    def __init__(self, message: str, last_state=None, step: Optional[int] = None):
        super().__init__(message)
        self.last_state = last_state
        self.step = step


class StageError(CurDistillError):
    """Raised when a curriculum stage fails; carries the curriculum index"""

    def __init__(self, message: str, curriculum: int, cause: Optional[BaseException] = None):
        super().__init__(f"curriculum {curriculum}: {message}")
        self.curriculum = curriculum
        self.cause = cause
