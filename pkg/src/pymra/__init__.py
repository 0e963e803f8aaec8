"""Parallel multi-resolution approximation (MRA) of Gaussian processes.

Likelihood evaluation, kriging prediction and covariance-parameter
optimization for large planar spatial data sets.
"""

from pymra.errors import (
    ConfigError,
    FormatError,
    MRAError,
    NumericalError,
    StructureError,
)
from pymra.kernel import CovarianceParams
from pymra.partition import BoundingBox, PartitionTree, build_tree

__all__ = [
    "BoundingBox",
    "ConfigError",
    "CovarianceParams",
    "FormatError",
    "MRAError",
    "NumericalError",
    "PartitionTree",
    "StructureError",
    "build_tree",
]

__version__ = "0.1.0"
