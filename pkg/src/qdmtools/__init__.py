"""Simulation and inversion of quantum diamond microscope (QDM) magnetic images."""

from qdmtools.constants import CONSTANTS, PhysicalConstants
from qdmtools.errors import (
    ConfigError,
    FilterError,
    FitError,
    FormatError,
    QdmError,
)

__version__ = "0.1.0"

__all__ = [
    "CONSTANTS",
    "PhysicalConstants",
    "QdmError",
    "ConfigError",
    "FilterError",
    "FitError",
    "FormatError",
]
