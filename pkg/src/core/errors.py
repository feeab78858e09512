"""Exception hierarchy shared by every kd-lic module.

Each exception carries the process exit status the CLI reports for it:
1 for user/config errors, 2 for environment/capability errors.
"""
from __future__ import annotations

from typing import Optional, Sequence


class KdlicError(Exception):
    """Base class for toolkit errors."""

    exit_code = 1


class ConfigurationError(KdlicError):
    """Invalid configuration value."""

    def __init__(self, message: str, field: Optional[str] = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ShapeError(KdlicError):
    pass


class NumericInputError(KdlicError):
    pass


class PreconditionError(KdlicError):
    pass


class DistillationCompatibilityError(KdlicError):
    """Student and teacher tensors cannot be compared term by term."""


class NonFiniteLossError(KdlicError):
    def __init__(self, message: str, checkpoint_path: Optional[str] = None):
        self.checkpoint_path = checkpoint_path
        super().__init__(message)


class IngestionError(KdlicError):
    def __init__(self, path, reason: str):
        self.path = str(path)
        super().__init__(f"cannot ingest {path}: {reason}")


class LossyEvalImageError(KdlicError):
    pass


class NoOverlapError(KdlicError):
    def __init__(self, axis: str, reference_range, test_range):
        self.reference_range = tuple(reference_range)
        self.test_range = tuple(test_range)
        super().__init__(
            f"RD curves do not overlap on {axis}: "
            f"reference [{reference_range[0]:.4f}, {reference_range[1]:.4f}], "
            f"test [{test_range[0]:.4f}, {test_range[1]:.4f}]"
        )


class UnsupportedLayerError(KdlicError):
    def __init__(self, layer_types: Sequence[str]):
        self.layer_types = sorted(set(layer_types))
        super().__init__(
            f"cannot count FLOPs for layer types: {', '.join(self.layer_types)}"
        )


class ImageEvaluationError(KdlicError):
    """Wraps a failure on one evaluation image, keeping the original exit code."""

    def __init__(self, image_name: str, cause: KdlicError):
        self.image_name = image_name
        self.exit_code = cause.exit_code
        super().__init__(f"{image_name}: {cause}")


class CheckpointSchemaError(KdlicError):
    pass


class ResultsParseError(KdlicError):
    def __init__(self, path, message: str, line: Optional[int] = None):
        self.path = str(path)
        self.line = line
        where = f"{path}:{line}" if line is not None else str(path)
        super().__init__(f"{where}: {message}")


class CapabilityError(KdlicError):
    """Something the host environment cannot provide."""

    exit_code = 2


class CodecUnavailableError(CapabilityError):
    def __init__(self, codec: str):
        self.codec = codec
        super().__init__(f"codec '{codec}' is not available in this Pillow build")


class EnergyCapabilityError(CapabilityError):
    pass
