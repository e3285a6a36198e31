"""Lyapunov feedback stabilization of QND-measured discrete-time quantum systems."""
from .kraus import (
    ConfigurationError,
    ContractError,
    ControlledKrausFamily,
    FilterDivergenceError,
    UnitaryKickFamily,
    ZeroProbabilityError,
    toy_rotation_family,
)
from .lyapunov import LyapunovSpec, synthesize
from .controller import ControllerConfig
from .detection import DetectionModel
from .photonbox import PhotonBoxParams

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "ContractError",
    "ControlledKrausFamily",
    "ControllerConfig",
    "DetectionModel",
    "FilterDivergenceError",
    "LyapunovSpec",
    "PhotonBoxParams",
    "UnitaryKickFamily",
    "ZeroProbabilityError",
    "synthesize",
    "toy_rotation_family",
]
