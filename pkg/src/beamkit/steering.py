"""Sensor responses g_n(omega, direction) for the three steering backends.

* :class:`FreeField` -- plane-wave phase factors ``exp(+j (omega/c) u.p_n)``.
* :class:`RigidSphere` -- point source scattered by a rigid sphere, the
  analytic stand-in for measured head-related transfer functions.
* :class:`HrtfSet` -- stored impulse responses, looked up by nearest direction.

Time convention is ``exp(+j omega t)``, so a microphone closer to the source
than the array origin gets a positive phase.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
from scipy import special

from .spatial import (
    SPEED_OF_SOUND,
    ArrayGeometry,
    Direction,
    SourcePosition,
    load_json_strict,
    unit_propagation_vector,
)

HRTF_VERSION = 1
SERIES_RTOL = 1e-10


class SphereConvergenceError(RuntimeError):
    """The scattering series did not meet its truncation criterion."""


class DirectionLookupError(LookupError):
    """No stored HRTF direction lies within the lookup tolerance."""


@dataclass(frozen=True)
class FreeField:
    c: float = SPEED_OF_SOUND
    name: str = field(default="freefield", init=False)


@dataclass(frozen=True)
class RigidSphere:
    radius_m: float = 0.06
    source_distance_m: float = 1.32
    max_order: int = 80
    c: float = SPEED_OF_SOUND
    name: str = field(default="sphere", init=False)

    def __post_init__(self):
        if not self.radius_m > 0:
            raise ValueError("sphere radius must be positive")
        if self.max_order < 1:
            raise ValueError("max_order must be at least 1")
        if not self.source_distance_m > self.radius_m:
            raise ValueError("source must lie outside the sphere")


@dataclass(frozen=True, eq=False)
class HrtfSet:
    """Direct-path impulse responses, shape ``(directions, mics, taps)``.

    ``bulk_delay_samples`` is a modelling delay common to every response
    (e.g. the causal shift added during synthesis). It is removed again when
    evaluating :func:`hrtf_response`, so designs never try to undo it.
    """

    sample_rate_hz: float
    source_distance_m: float
    directions: tuple
    hrirs: np.ndarray
    bulk_delay_samples: int = 0
    name: str = field(default="hrtf", init=False)

    def __post_init__(self):
        if not (math.isfinite(self.sample_rate_hz) and self.sample_rate_hz > 0):
            raise ValueError("sample rate must be positive")
        if not (math.isfinite(self.source_distance_m) and self.source_distance_m > 0):
            raise ValueError("source distance must be positive")
        dirs = tuple(self.directions)
        if not dirs:
            raise ValueError("HRTF set needs at least one direction")
        h = np.array(self.hrirs, dtype=float)
        if h.ndim != 3 or h.shape[0] != len(dirs) or h.shape[1] < 1 or h.shape[2] < 1:
            raise ValueError("hrirs must have shape (directions, mics, taps)")
        if not np.all(np.isfinite(h)):
            raise ValueError("HRIR taps must be finite")
        units = np.array([unit_propagation_vector(d) for d in dirs])
        gram = units @ units.T
        np.fill_diagonal(gram, -1.0)
        if np.any(gram > 1 - 1e-14):
            raise ValueError("duplicate directions in HRTF set")
        h.setflags(write=False)
        units.setflags(write=False)
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "hrirs", h)
        object.__setattr__(self, "_units", units)

    @property
    def mic_count(self) -> int:
        return self.hrirs.shape[1]

    @property
    def length(self) -> int:
        return self.hrirs.shape[2]

    def index_of(self, direction: Direction, tol_deg=0.5) -> int:
        cosang = self._units @ unit_propagation_vector(direction)
        i = int(np.argmax(cosang))
        ang = math.degrees(math.acos(min(1.0, max(-1.0, float(cosang[i])))))
        if ang > tol_deg:
            raise DirectionLookupError(
                f"no stored direction within {tol_deg} deg of "
                f"({direction.azimuth_deg}, {direction.elevation_polar_deg}); nearest is {ang:.3f} deg away"
            )
        return i

    def hrir(self, direction: Direction, tol_deg=0.5) -> np.ndarray:
        return self.hrirs[self.index_of(direction, tol_deg)]

    def to_dict(self) -> dict:
        return {
            "version": HRTF_VERSION,
            "sample_rate_hz": self.sample_rate_hz,
            "source_distance_m": self.source_distance_m,
            "mics": self.mic_count,
            "bulk_delay_samples": self.bulk_delay_samples,
            "directions": [
                {"azimuth_deg": d.azimuth_deg, "elevation_polar_deg": d.elevation_polar_deg}
                for d in self.directions
            ],
            "hrirs": self.hrirs.tolist(),
        }


SteeringModel = Union[FreeField, RigidSphere, HrtfSet]


def load_hrtf_set(path) -> HrtfSet:
    data = load_json_strict(path)
    try:
        dirs = tuple(Direction(d["azimuth_deg"], d["elevation_polar_deg"]) for d in data["directions"])
        hrirs = data["hrirs"]
        mics = int(data["mics"])
        fs = float(data["sample_rate_hz"])
        dist = float(data["source_distance_m"])
    except (KeyError, TypeError) as exc:
        raise ValueError(f"HRTF file {path}: missing or malformed field ({exc})") from None
    if len(hrirs) != len(dirs):
        raise ValueError("HRTF file: one hrir block per direction required")
    lengths = {len(taps) for block in hrirs for taps in block}
    if any(len(block) != mics for block in hrirs):
        raise ValueError(f"HRTF file: every direction needs {mics} responses")
    if len(lengths) != 1:
        raise ValueError(f"HRTF file: HRIR lengths differ {sorted(lengths)}")
    return HrtfSet(fs, dist, dirs, np.array(hrirs, dtype=float), int(data.get("bulk_delay_samples", 0)))


def save_hrtf_set(hset: HrtfSet, path):
    Path(path).write_text(json.dumps(hset.to_dict()) + "\n")


# -- free field -------------------------------------------------------------

def freefield_response(geom: ArrayGeometry, direction: Direction, freq_hz, c=SPEED_OF_SOUND) -> np.ndarray:
    if freq_hz < 0:
        raise ValueError("frequency must be non-negative")
    u = unit_propagation_vector(direction)
    return np.exp(1j * (2 * np.pi * freq_hz / c) * (geom.mics @ u))


# -- rigid sphere -----------------------------------------------------------

def _hankel2(n, x):
    return special.spherical_jn(n, x) - 1j * special.spherical_yn(n, x)


def _hankel2_prime(n, x):
    return special.spherical_jn(n, x, derivative=True) - 1j * special.spherical_yn(n, x, derivative=True)


def _legendre_table(max_order, x):
    """P_0..P_max_order evaluated at x, via the three-term recurrence."""
    x = np.asarray(x, dtype=float)
    out = np.empty((max_order + 1,) + x.shape)
    out[0] = 1.0
    if max_order >= 1:
        out[1] = x
    for n in range(1, max_order):
        out[n + 1] = ((2 * n + 1) * x * out[n] - n * out[n - 1]) / (n + 1)
    return out


def _sphere_series(radius_m, distance_m, cos_angles, freq_hz, max_order, c=SPEED_OF_SOUND):
    """Normalized surface pressure for an array of mic/source angle cosines."""
    cos_angles = np.asarray(cos_angles, dtype=float)
    if freq_hz == 0:
        return np.ones(cos_angles.shape, dtype=complex)
    k = 2 * np.pi * freq_hz / c
    ka, kr = k * radius_m, k * distance_m
    orders = np.arange(max_order + 1)
    with np.errstate(all="ignore"):
        radial = (2 * orders + 1) * _hankel2(orders, kr) / _hankel2_prime(orders, ka)
    legendre = _legendre_table(max_order, cos_angles.ravel())
    terms = radial[:, None] * legendre
    partial = np.cumsum(terms, axis=0)
    # |P_n| <= 1, so |radial| bounds every term at that order
    bound = np.abs(radial)[:, None]
    with np.errstate(invalid="ignore"):
        done = bound < SERIES_RTOL * np.abs(partial)
    finite = np.isfinite(radial)
    first_bad = int(np.argmin(finite)) if not finite.all() else max_order + 1
    done[first_bad:] = False
    if not done.any(axis=0).all():
        raise SphereConvergenceError(
            f"sphere series not converged by order {min(max_order, first_bad - 1)} "
            f"(ka={ka:.4g}, kr={kr:.4g})"
        )
    stop = np.argmax(done, axis=0)
    total = partial[stop, np.arange(partial.shape[1])]
    pref = -(distance_m / (k * radius_m**2)) * np.exp(1j * kr)
    return (pref * total).reshape(cos_angles.shape)


def sphere_response(radius_m, source: SourcePosition, mic_angle_rad, freq_hz, max_order=80, c=SPEED_OF_SOUND):
    """Pressure on a rigid sphere due to a point source, relative to free field at the centre.

    ``mic_angle_rad`` is the great-circle angle between the microphone's
    surface normal and the source direction.
    """
    if source.distance_m <= radius_m:
        raise ValueError("source lies inside the sphere")
    if freq_hz < 0:
        raise ValueError("frequency must be non-negative")
    val = _sphere_series(radius_m, source.distance_m, math.cos(mic_angle_rad), freq_hz, max_order, c)
    return complex(val)


def _mic_normals(geom: ArrayGeometry) -> np.ndarray:
    norms = np.linalg.norm(geom.mics, axis=1)
    if np.any(norms < 1e-12):
        raise ValueError("rigid-sphere model needs every microphone away from the centre")
    return geom.mics / norms[:, None]


# -- dispatch ---------------------------------------------------------------

def _hrtf_dtft(hset: HrtfSet, hrirs, freqs_hz):
    """DTFT of ``hrirs[..., taps]`` at ``freqs_hz`` with the bulk delay removed."""
    omega = 2 * np.pi * np.asarray(freqs_hz, dtype=float) / hset.sample_rate_hz
    lags = np.arange(hrirs.shape[-1]) - hset.bulk_delay_samples
    kernel = np.exp(-1j * np.outer(omega, lags))
    return np.einsum("ft,...t->f...", kernel, hrirs)


def hrtf_response(hset: HrtfSet, direction: Direction, freq_hz, tol_deg=0.5) -> np.ndarray:
    return _hrtf_dtft(hset, hset.hrir(direction, tol_deg), [freq_hz])[0]


def sensor_responses(model: SteeringModel, geom: ArrayGeometry, directions, freqs_hz) -> np.ndarray:
    """Responses for every frequency, direction and microphone, shape ``(F, M, N)``."""
    freqs = np.atleast_1d(np.asarray(freqs_hz, dtype=float))
    if np.any(freqs < 0):
        raise ValueError("frequencies must be non-negative")
    directions = list(directions)
    units = np.array([unit_propagation_vector(d) for d in directions]).reshape(-1, 3)
    if isinstance(model, FreeField):
        proj = units @ geom.mics.T
        return np.exp(1j * (2 * np.pi * freqs[:, None, None] / model.c) * proj[None])
    if isinstance(model, RigidSphere):
        cosang = np.clip(units @ _mic_normals(geom).T, -1.0, 1.0)
        return np.stack([
            _sphere_series(model.radius_m, model.source_distance_m, cosang, f, model.max_order, model.c)
            for f in freqs
        ])
    if isinstance(model, HrtfSet):
        if model.mic_count != geom.num_mics:
            raise ValueError(f"HRTF set has {model.mic_count} mics, geometry has {geom.num_mics}")
        idx = [model.index_of(d) for d in directions]
        return _hrtf_dtft(model, model.hrirs[idx], freqs)
    raise TypeError(f"unknown steering model {model!r}")


@dataclass(frozen=True, eq=False)
class SteeringMatrix:
    freq_hz: float
    entries: np.ndarray
    look_vector: np.ndarray

    def __post_init__(self):
        if self.entries.ndim != 2 or self.entries.shape[1] != self.look_vector.shape[0]:
            raise ValueError("steering matrix and look vector disagree in size")
        if not np.linalg.norm(self.look_vector) > 0:
            raise ValueError("look vector is zero")


def steering_matrix(model: SteeringModel, geom: ArrayGeometry, directions, look: Direction, freq_hz) -> SteeringMatrix:
    g = sensor_responses(model, geom, list(directions) + [look], [freq_hz])[0]
    return SteeringMatrix(float(freq_hz), g[:-1], g[-1])


def steering_matrices(model, geom, directions, look, freqs_hz) -> list[SteeringMatrix]:
    g = sensor_responses(model, geom, list(directions) + [look], freqs_hz)
    return [SteeringMatrix(float(f), gi[:-1], gi[-1]) for f, gi in zip(np.atleast_1d(freqs_hz), g)]


# -- synthesis of stand-in HRTF sets ---------------------------------------

def _causal_window(length, bulk):
    """Flat window with raised-cosine fades; the fade-in ends well before the bulk delay."""
    w = np.ones(length)
    # long fades keep the pass-band DTFT within 1e-3 of the unwindowed spectrum
    fade_in = max(3 * bulk // 4, 1)
    fade_out = 3 * length // 8
    w[:fade_in] = 0.5 - 0.5 * np.cos(np.pi * np.arange(fade_in) / fade_in)
    w[length - fade_out:] = 0.5 + 0.5 * np.cos(np.pi * (np.arange(fade_out) + 1) / fade_out)
    return w


def _responses_to_hrirs(spectra, length, bulk):
    """Half spectra ``(..., length//2 + 1)`` to windowed, causally shifted HRIRs."""
    bins = np.arange(length // 2 + 1)
    spectra = spectra * np.exp(-2j * np.pi * bins * bulk / length)
    spectra[..., 0] = spectra[..., 0].real
    spectra[..., -1] = spectra[..., -1].real
    return np.fft.irfft(spectra, n=length, axis=-1) * _causal_window(length, bulk)


def _check_length(length):
    if length < 4 or length & (length - 1):
        raise ValueError("HRIR length must be a power of two >= 4")


def synthesize_sphere_hrtf_set(geom, radius_m, distance_m, directions, fs=16000.0, length=256, max_order=80, c=SPEED_OF_SOUND) -> HrtfSet:
    """Rigid-sphere HRIRs for ``directions`` at one source distance.

    Microphones are projected radially onto the sphere surface. The returned
    responses carry a bulk delay of ``length // 4`` samples.
    """
    _check_length(length)
    model = RigidSphere(radius_m, distance_m, max_order, c)
    freqs = np.arange(length // 2 + 1) * fs / length
    g = sensor_responses(model, geom, directions, freqs)  # (F, D, N)
    bulk = length // 4
    hrirs = _responses_to_hrirs(np.moveaxis(g, 0, -1), length, bulk)
    return HrtfSet(float(fs), float(distance_m), tuple(directions), hrirs, bulk)


def synthesize_freefield_hrtf_set(geom, distance_m, directions, fs=16000.0, length=256, c=SPEED_OF_SOUND) -> HrtfSet:
    """Plane-wave (free-field) responses of the actual mic positions, as an HRIR set."""
    _check_length(length)
    freqs = np.arange(length // 2 + 1) * fs / length
    g = sensor_responses(FreeField(c), geom, directions, freqs)
    bulk = length // 4
    hrirs = _responses_to_hrirs(np.moveaxis(g, 0, -1), length, bulk)
    return HrtfSet(float(fs), float(distance_m), tuple(directions), hrirs, bulk)
