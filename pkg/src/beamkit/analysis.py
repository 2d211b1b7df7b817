"""Beampatterns and white-noise gain of narrowband or FIR designs."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .design import FirBeamformer
from .steering import sensor_responses

DB_FLOOR = -80.0


@dataclass(frozen=True, eq=False)
class Beampattern:
    freqs_hz: np.ndarray
    directions: tuple
    values: np.ndarray
    backend: str = ""

    def __post_init__(self):
        if self.values.shape != (len(self.freqs_hz), len(self.directions)):
            raise ValueError("beampattern values must be F x M")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("beampattern has non-finite entries")


@dataclass(frozen=True, eq=False)
class WngCurve:
    freqs_hz: np.ndarray
    wng_db: np.ndarray


def channel_responses(filters, freqs_hz) -> np.ndarray:
    """W_n(omega) for an FIR beamformer or a list of narrowband weights, shape ``(F, N)``.

    Narrowband weights are only defined at their own frequencies, which must
    match ``freqs_hz``.
    """
    freqs = np.asarray(freqs_hz, dtype=float)
    if isinstance(filters, FirBeamformer):
        return filters.response(freqs)
    filters = list(filters)
    own = np.array([nb.freq_hz for nb in filters])
    if own.shape != freqs.shape or not np.allclose(own, freqs, rtol=0, atol=1e-9):
        raise ValueError("narrowband weights can only be evaluated at their design frequencies")
    return np.array([nb.w for nb in filters])


def beampattern(filters, model, geom, directions, freqs_hz) -> Beampattern:
    """B(omega, dir) = sum_n W_n(omega) g_n(omega, dir)."""
    freqs = np.asarray(freqs_hz, dtype=float)
    W = channel_responses(filters, freqs)
    g = sensor_responses(model, geom, directions, freqs)
    values = np.einsum("fn,fmn->fm", W, g)
    return Beampattern(freqs, tuple(directions), values, getattr(model, "name", type(model).__name__))


def bp_db(bp) -> np.ndarray:
    values = bp.values if isinstance(bp, Beampattern) else np.asarray(bp)
    power = np.abs(values) ** 2
    with np.errstate(divide="ignore"):
        out = 10 * np.log10(power)
    return np.maximum(out, DB_FLOOR)


def wng_curve(filters, model, geom, look, freqs_hz) -> WngCurve:
    """|w^T d|^2 / (w^H w) in dB, with d taken from ``model``."""
    freqs = np.asarray(freqs_hz, dtype=float)
    W = channel_responses(filters, freqs)
    d = sensor_responses(model, geom, [look], freqs)[:, 0, :]
    energy = np.sum(np.abs(W) ** 2, axis=1)
    if np.any(energy <= 0):
        raise ValueError("zero weight vector at some frequency")
    wng = np.abs(np.sum(W * d, axis=1)) ** 2 / energy
    return WngCurve(freqs, 10 * np.log10(wng))


def write_beampattern_csv(bp: Beampattern, path):
    """Header: ``freq_hz`` then one column per azimuth; cells in dB."""
    db = bp_db(bp)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["freq_hz"] + [repr(float(d.azimuth_deg)) for d in bp.directions])
        for f, row in zip(bp.freqs_hz, db):
            wr.writerow([repr(float(f))] + [repr(float(v)) for v in row])


def read_beampattern_csv(path):
    """Returns ``(freqs, azimuths, bp_db)`` arrays."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    az = np.array([float(x) for x in rows[0][1:]])
    body = np.array([[float(x) for x in r] for r in rows[1:]])
    return body[:, 0], az, body[:, 1:]


def write_wng_csv(curve: WngCurve, path):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["freq_hz", "wng_db"])
        for f, v in zip(curve.freqs_hz, curve.wng_db):
            wr.writerow([repr(float(f)), repr(float(v))])


def read_wng_csv(path) -> WngCurve:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    data = np.array([[float(a), float(b)] for a, b in rows])
    return WngCurve(data[:, 0], data[:, 1])
