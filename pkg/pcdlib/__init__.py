from .version import VERSION
from .session import PcdSession
from .config import TrainConfig, load_config, preset_config
from .exceptions import (
    PcdlibError,
    ShapeError,
    DomainError,
    GradientError,
    ValidationError,
    ConfigurationError,
    CheckpointError,
    AdaptationError,
    AlreadyAdaptedError,
    InvarianceError,
    DatasetError,
    DivergenceError,
)

__version__ = VERSION
__all__ = [
    "PcdSession",
    "TrainConfig",
    "load_config",
    "preset_config",
    "PcdlibError",
    "ShapeError",
    "DomainError",
    "GradientError",
    "ValidationError",
    "ConfigurationError",
    "CheckpointError",
    "AdaptationError",
    "AlreadyAdaptedError",
    "InvarianceError",
    "DatasetError",
    "DivergenceError",
]
