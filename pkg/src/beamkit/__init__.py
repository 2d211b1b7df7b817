"""Robust least-squares frequency-invariant beamforming with free-field or HRTF steering."""

from .spatial import ArrayGeometry, Direction, SourcePosition, default_geometry, direction_grid, elevated_source
from .steering import FreeField, HrtfSet, RigidSphere, load_hrtf_set, save_hrtf_set
from .design import DesignSpec, FirBeamformer, FrequencyGrid, InfeasibleWngError, design_fir, solve_narrowband

__all__ = [
    "ArrayGeometry", "Direction", "SourcePosition", "default_geometry", "direction_grid", "elevated_source",
    "FreeField", "HrtfSet", "RigidSphere", "load_hrtf_set", "save_hrtf_set",
    "DesignSpec", "FirBeamformer", "FrequencyGrid", "InfeasibleWngError", "design_fir", "solve_narrowband",
]
