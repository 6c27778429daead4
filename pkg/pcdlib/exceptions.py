#!/usr/bin/env python3
"""Custom exceptions for pcdlib.

Every error raised by the library derives from PcdlibError; the CLI
reports those as "Error: <message>" and exits 1.
"""

from typing import Any, Optional, Sequence


class PcdlibError(Exception):
    """Base exception for all pcdlib errors."""

    pass


class ShapeError(PcdlibError):
    """Exception raised when tensor shapes, dims or channel counts disagree.

    Attributes:
        op: Name of the operation that rejected its inputs
        expected: Expected shape (or description of it)
        got: Shape that was actually passed
    """

    def __init__(
        self,
        op: str,
        expected: Any = None,
        got: Any = None,
        message: Optional[str] = None,
    ):
        self.op = op
        self.expected = expected
        self.got = got
        if message is None:
            message = f"{op}: expected shape {expected}, got {got}"
        super().__init__(message)


class DomainError(PcdlibError):
    """Exception raised when a value lies outside an operation's domain."""

    pass


class GradientError(PcdlibError):
    """Exception raised for autodiff misuse (non-scalar loss, no graph, NaN grads)."""

    pass


class ValidationError(PcdlibError):
    """Exception raised for argument validation errors.

    Attributes:
        field: Field that failed validation
        value: Value that was invalid
    """

    def __init__(self, message: str, field: str = None, value: Any = None):
        self.field = field
        self.value = value
        super().__init__(message)


class ConfigurationError(PcdlibError):
    """Exception raised for configuration errors.

    Attributes:
        key: Dotted key path of the offending entry (e.g. ``loss.tau``)
    """

    def __init__(self, message: str, key: str = None):
        self.key = key
        if key is not None and key not in message:
            message = f"{key}: {message}"
        super().__init__(message)


class CheckpointError(PcdlibError):
    """Exception raised when a checkpoint cannot be written or decoded."""

    pass


class BadMagicError(CheckpointError):
    """The file does not start with the checkpoint magic bytes."""

    pass


class TruncatedCheckpointError(CheckpointError):
    """The file ends before the declared content."""

    pass


class DuplicatePathError(CheckpointError):
    """Two entries share the same parameter path."""

    def __init__(self, path: str):
        self.path = path
        super().__init__(f"duplicate parameter path '{path}'")


class UnsupportedDtypeError(CheckpointError):
    """An entry declares a dtype code other than f32."""

    def __init__(self, path: str, code: int):
        self.path = path
        self.code = code
        super().__init__(f"entry '{path}' has unsupported dtype code {code}")


class UnsupportedVersionError(CheckpointError):
    """The file declares a format version this build cannot read."""

    pass


class AdaptationError(PcdlibError):
    """Exception raised when a head cannot be rewritten by the SpatialAdaptor."""

    pass


class AlreadyAdaptedError(AdaptationError):
    """Exception raised when adapting a head that already consumes maps."""

    def __init__(self, message: str = "head is already adapted (map-kind)"):
        super().__init__(message)


class InvarianceError(PcdlibError):
    """Exception raised when an adapted head fails invariance verification.

    Attributes:
        report: The failing InvarianceReport
    """

    def __init__(self, report: Any, message: Optional[str] = None):
        self.report = report
        if message is None:
            message = (
                f"adapted head deviates from the original by "
                f"{report.max_abs_dev:.3e} (tolerance {report.tol:.1e})"
            )
        super().__init__(message)


class DatasetError(PcdlibError):
    """Exception raised for empty or malformed image stores."""

    pass


class DivergenceError(PcdlibError):
    """Exception raised when training produces a non-finite loss or gradient.

    Attributes:
        step: Optimization step at which divergence was detected
        value: The offending loss value (if any)
    """

    def __init__(self, step: int, value: float = None, what: str = "loss"):
        self.step = step
        self.value = value
        super().__init__(f"training diverged at step {step}: {what} is {value}")


def format_shape(shape: Sequence[int]) -> str:
    """Render a shape as ``[a, b, c]`` for messages."""
    return "[" + ", ".join(str(int(d)) for d in shape) + "]"
