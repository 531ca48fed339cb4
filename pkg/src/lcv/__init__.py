"""Longitudinal control volume estimation and belt speed control."""

from .core import (
    InvalidSpeedError,
    MaterialSpec,
    SortStation,
    StateVector,
    StepOutcome,
    SystemConfig,
    integral_motion_matrix,
    motion_matrix,
    separation_params,
    sort_matrix,
    step,
    total_material,
)

__all__ = [
    "InvalidSpeedError",
    "MaterialSpec",
    "SortStation",
    "StateVector",
    "StepOutcome",
    "SystemConfig",
    "integral_motion_matrix",
    "motion_matrix",
    "separation_params",
    "sort_matrix",
    "step",
    "total_material",
]

__version__ = "0.1.0"
