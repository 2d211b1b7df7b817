"""Coordinate conventions, array geometry and direction grids.

Azimuth is measured in the x-y plane from +x, the polar angle from +z.
Broadside (the default look direction) is azimuth 90 deg, i.e. +y.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

SPEED_OF_SOUND = 343.0
GEOMETRY_VERSION = 1


@dataclass(frozen=True)
class Direction:
    azimuth_deg: float
    elevation_polar_deg: float = 90.0

    def __post_init__(self):
        az = float(self.azimuth_deg) % 360.0
        # 359.9999999 % 360 can round to 360.0
        if az >= 360.0:
            az = 0.0
        el = float(self.elevation_polar_deg)
        if not math.isfinite(az) or not math.isfinite(el):
            raise ValueError("direction angles must be finite")
        if not 0.0 <= el <= 180.0:
            raise ValueError(f"polar angle {el} outside [0, 180]")
        object.__setattr__(self, "azimuth_deg", az)
        object.__setattr__(self, "elevation_polar_deg", el)

    def angle_to(self, other: "Direction") -> float:
        """Great-circle angle to another direction, in degrees."""
        a, b = unit_propagation_vector(self), unit_propagation_vector(other)
        # atan2 form stays accurate for nearly equal directions, unlike acos
        return math.degrees(math.atan2(float(np.linalg.norm(np.cross(a, b))), float(np.dot(a, b))))


@dataclass(frozen=True)
class SourcePosition:
    direction: Direction
    distance_m: float

    def __post_init__(self):
        if not (math.isfinite(self.distance_m) and self.distance_m > 0):
            raise ValueError("source distance must be strictly positive")

    @property
    def cartesian(self) -> np.ndarray:
        return self.distance_m * unit_propagation_vector(self.direction)


def elevated_source(azimuth_deg, horizontal_distance_m, height_m=0.73) -> SourcePosition:
    """Source at a horizontal distance and a height above the array origin.

    With the default height a 1.1 m horizontal distance gives a polar angle
    of 56.4 deg, and 2 m gives 69.9 deg.
    """
    polar = math.degrees(math.atan2(horizontal_distance_m, height_m))
    return SourcePosition(Direction(azimuth_deg, polar), math.hypot(horizontal_distance_m, height_m))


def unit_propagation_vector(direction: Direction) -> np.ndarray:
    """Unit vector pointing from the array origin toward the source.

    The corresponding wave vector is ``-(omega / c) * u``.
    """
    az = math.radians(direction.azimuth_deg)
    pol = math.radians(direction.elevation_polar_deg)
    return np.array([math.sin(pol) * math.cos(az), math.sin(pol) * math.sin(az), math.cos(pol)])


def wave_vector(direction: Direction, freq_hz, c=SPEED_OF_SOUND) -> np.ndarray:
    return -(2 * math.pi * freq_hz / c) * unit_propagation_vector(direction)


def direction_grid(azimuth_step_deg, elevation_polar_deg=90.0, span=(0.0, 180.0)) -> list[Direction]:
    """Azimuth scan ``span[0], span[0] + step, ...`` up to ``span[1]`` at a fixed polar angle."""
    if not azimuth_step_deg > 0:
        raise ValueError("azimuth step must be positive")
    start, stop = span
    if stop < start or stop - start >= 360.0:
        raise ValueError(f"invalid azimuth span {span}")
    count = int(math.floor((stop - start) / azimuth_step_deg + 1e-9)) + 1
    return [Direction(start + i * azimuth_step_deg, elevation_polar_deg) for i in range(count)]


@dataclass(frozen=True, eq=False)
class ArrayGeometry:
    mics: np.ndarray
    labels: tuple = ()
    reference_mic: int = 0

    def __post_init__(self):
        mics = np.array(self.mics, dtype=float)
        if mics.ndim != 2 or mics.shape[1] != 3 or mics.shape[0] < 1:
            raise ValueError("mics must be a non-empty list of 3-vectors")
        if not np.all(np.isfinite(mics)):
            raise ValueError("microphone coordinates must be finite")
        n = mics.shape[0]
        for i in range(n):
            for j in range(i + 1, n):
                if np.linalg.norm(mics[i] - mics[j]) <= 1e-9:
                    raise ValueError(f"microphones {i} and {j} coincide")
        labels = tuple(self.labels) if self.labels else tuple(f"mic{i}" for i in range(n))
        if len(labels) != n:
            raise ValueError("one label per microphone required")
        if not 0 <= int(self.reference_mic) < n:
            raise ValueError(f"reference_mic {self.reference_mic} out of range for {n} mics")
        mics.setflags(write=False)
        object.__setattr__(self, "mics", mics)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "reference_mic", int(self.reference_mic))

    @property
    def num_mics(self) -> int:
        return self.mics.shape[0]

    def to_dict(self) -> dict:
        return {
            "version": GEOMETRY_VERSION,
            "mics": self.mics.tolist(),
            "labels": list(self.labels),
            "reference_mic": self.reference_mic,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ArrayGeometry":
        try:
            mics = data["mics"]
        except (KeyError, TypeError):
            raise ValueError("geometry needs a 'mics' field") from None
        return cls(mics, tuple(data.get("labels", ())), data.get("reference_mic", 0))


def _reject_constant(name):
    raise ValueError(f"non-finite number {name} not allowed")


def load_json_strict(path):
    """json.load that refuses NaN / Infinity literals."""
    with open(path) as fh:
        return json.load(fh, parse_constant=_reject_constant)


def load_geometry(path) -> ArrayGeometry:
    return ArrayGeometry.from_dict(load_json_strict(path))


def save_geometry(geom: ArrayGeometry, path):
    Path(path).write_text(json.dumps(geom.to_dict(), indent=2) + "\n")


def default_geometry() -> ArrayGeometry:
    """Five microphones on the upper front of a 6 cm head (NAO-like placeholder)."""
    ref = resources.files("beamkit") / "data" / "head5.json"
    with resources.as_file(ref) as p:
        return load_geometry(p)
