"""Robust least-squares frequency-invariant beamformer design.

At each design frequency the weights solve

    minimize    ||G w - b||^2
    subject to  d^T w = 1,  |d^T w|^2 / (w^H w) >= gamma

and the narrowband solutions are then fitted by length-L FIR filters.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import linalg

from .spatial import ArrayGeometry, Direction, load_json_strict
from .steering import SteeringMatrix, SteeringModel, steering_matrices

log = logging.getLogger(__name__)

NORM_RTOL = 1e-10
MAX_STEPS = 200
DONT_CARE_WEIGHT = 0.01


class InfeasibleWngError(ValueError):
    """The requested white-noise-gain bound exceeds what the array can reach."""

    def __init__(self, gamma_linear, max_wng, freq_index=None, freq_hz=None):
        self.gamma_linear = gamma_linear
        self.max_wng = max_wng
        self.freq_index = freq_index
        self.freq_hz = freq_hz
        where = "" if freq_index is None else f" at frequency index {freq_index} ({freq_hz:g} Hz)"
        super().__init__(
            f"WNG bound {10 * math.log10(gamma_linear):.3f} dB is infeasible{where}; "
            f"maximum achievable WNG is {10 * math.log10(max_wng):.3f} dB ({max_wng:.6g})"
        )


@dataclass(frozen=True, eq=False)
class FrequencyGrid:
    sample_rate_hz: float
    freqs_hz: np.ndarray
    band: tuple

    def __post_init__(self):
        freqs = np.asarray(self.freqs_hz, dtype=float)
        if not self.sample_rate_hz > 0:
            raise ValueError("sample rate must be positive")
        if freqs.ndim != 1 or freqs.size < 1:
            raise ValueError("need at least one design frequency")
        if np.any(np.diff(freqs) <= 0):
            raise ValueError("design frequencies must be strictly increasing")
        if freqs[0] < 0 or freqs[-1] > self.sample_rate_hz / 2:
            raise ValueError("design frequencies must lie in [0, fs/2]")
        lo, hi = self.band
        if not freqs[0] <= lo <= hi <= freqs[-1]:
            raise ValueError(f"band {self.band} outside the design grid")
        freqs.setflags(write=False)
        object.__setattr__(self, "freqs_hz", freqs)
        object.__setattr__(self, "band", (float(lo), float(hi)))

    @classmethod
    def uniform(cls, sample_rate_hz=16000.0, num=129, band=(300.0, 5000.0)):
        return cls(sample_rate_hz, np.linspace(0.0, sample_rate_hz / 2, num), band)

    def in_band(self) -> np.ndarray:
        lo, hi = self.band
        return (self.freqs_hz >= lo) & (self.freqs_hz <= hi)


def desired_response(directions, look: Direction, tol_deg=1e-6) -> np.ndarray:
    """1 at the look direction, 0 elsewhere."""
    b = np.array([1.0 if d.angle_to(look) <= tol_deg else 0.0 for d in directions])
    if not b.any():
        raise ValueError("look direction is not part of the design directions")
    return b


@dataclass(frozen=True, eq=False)
class DesignSpec:
    grid: FrequencyGrid
    directions: tuple
    look: Direction
    gamma_db: float = -10.0
    fir_length: int = 1024
    model: SteeringModel = None
    desired: np.ndarray = None

    def __post_init__(self):
        dirs = tuple(self.directions)
        if not dirs:
            raise ValueError("need at least one design direction")
        desired = desired_response(dirs, self.look) if self.desired is None else np.asarray(self.desired)
        if desired.shape != (len(dirs),):
            raise ValueError("desired response needs one entry per direction")
        mags = np.abs(desired)
        if np.any(mags > 1 + 1e-12):
            raise ValueError("desired response entries must lie in [0, 1]")
        look_hits = [i for i, d in enumerate(dirs) if d.angle_to(self.look) <= 1e-6]
        if not look_hits or any(abs(desired[i] - 1) > 1e-12 for i in look_hits):
            raise ValueError("desired response must be 1 at the look direction")
        if not math.isfinite(self.gamma_db):
            raise ValueError("gamma_db must be finite")
        if self.fir_length < 2:
            raise ValueError("FIR length must be at least 2")
        object.__setattr__(self, "directions", dirs)
        object.__setattr__(self, "desired", desired)

    @property
    def gamma_linear(self) -> float:
        return 10 ** (self.gamma_db / 10)

    def digest(self) -> str:
        """Short content hash used as provenance in exported filters."""
        model = self.model
        if model is None:
            mdesc = None
        elif hasattr(model, "hrirs"):
            mdesc = {"hrtf": hashlib.sha256(np.ascontiguousarray(model.hrirs).tobytes()).hexdigest()[:16],
                     "fs": model.sample_rate_hz, "distance": model.source_distance_m}
        else:
            mdesc = repr(model)
        payload = {
            "fs": self.grid.sample_rate_hz,
            "freqs": self.grid.freqs_hz.tolist(),
            "band": self.grid.band,
            "dirs": [(d.azimuth_deg, d.elevation_polar_deg) for d in self.directions],
            "look": (self.look.azimuth_deg, self.look.elevation_polar_deg),
            "desired": [(float(np.real(x)), float(np.imag(x))) for x in self.desired],
            "gamma_db": self.gamma_db,
            "L": self.fir_length,
            "model": mdesc,
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class NarrowbandWeights:
    freq_hz: float
    w: np.ndarray
    lam: float
    residual: float
    wng_linear: float

    @property
    def wng_db(self) -> float:
        return 10 * math.log10(self.wng_linear)


def _constraint_basis(d):
    """Particular solution of d^T w = 1 and an orthonormal basis of d^T v = 0."""
    dd = float(np.vdot(d, d).real)
    w0 = np.conj(d) / dd
    # columns 1.. of a full QR of conj(d) span its Hermitian orthogonal complement
    q, _ = linalg.qr(np.conj(d)[:, None], mode="full")
    return w0, q[:, 1:], dd


def _ridge_norms(s, c, lam):
    return math.sqrt(float(np.sum(np.abs(c) ** 2 / (s + lam) ** 2)))


def _trust_region_ls(A, r, radius, scale=0.0):
    """min ||A z - r|| s.t. ||z|| <= radius, via ridge normal equations and bisection on lambda.

    Eigenvalues of A^H A below 1e-13 * max(largest eigenvalue, ``scale``) are
    treated as exact zeros; pass ``||G||_F^2`` as ``scale`` so that an A that
    is zero up to rounding is recognized as such.
    """
    n = A.shape[1]
    if n == 0 or radius == 0:
        return np.zeros(n, dtype=complex), 0.0
    AhA = A.conj().T @ A
    s, Q = linalg.eigh(AhA)
    s = np.clip(s, 0.0, None)
    c = Q.conj().T @ (A.conj().T @ r)
    smax = s.max() if s.size else 0.0
    null = s <= 1e-13 * max(smax, scale, 1e-300)
    # minimum-norm unconstrained minimizer
    coef0 = np.where(null, 0.0, c / np.where(null, 1.0, s))
    if np.linalg.norm(coef0) <= radius:
        return Q @ coef0, 0.0

    def norm_at(lam):
        return _ridge_norms(s, np.where(null, 0.0, c), lam)

    lo, hi = 0.0, 1.0
    steps = 0
    while norm_at(hi) > radius:
        lo, hi = hi, 2 * hi
        steps += 1
        if steps > MAX_STEPS:
            raise RuntimeError("could not bracket the ridge multiplier")
    for _ in range(MAX_STEPS):
        mid = 0.5 * (lo + hi)
        nm = norm_at(mid)
        if nm > radius:
            lo = mid
        else:
            hi = mid
        if abs(nm - radius) <= NORM_RTOL * radius or hi - lo <= 1e-300:
            break
    # the upper end of the bracket is always feasible
    lam = hi
    coef = np.where(null, 0.0, c) / (s + lam)
    return Q @ coef, lam


def solve_narrowband(G: SteeringMatrix, desired, gamma_linear) -> NarrowbandWeights:
    """Global minimizer of the constrained LS problem at one frequency."""
    d = np.asarray(G.look_vector, dtype=complex)
    Gm = np.asarray(G.entries, dtype=complex)
    b = np.asarray(desired, dtype=complex)
    if Gm.shape[0] == 0:
        raise ValueError("empty direction set")
    if b.shape != (Gm.shape[0],):
        raise ValueError("desired response length does not match the steering matrix")
    if not gamma_linear > 0:
        raise ValueError("WNG bound must be positive")
    w0, V, dd = _constraint_basis(d)
    if gamma_linear > dd * (1 + 1e-12):
        raise InfeasibleWngError(gamma_linear, dd, freq_hz=G.freq_hz)
    radius = math.sqrt(max(1 / gamma_linear - 1 / dd, 0.0))
    r = b - Gm @ w0
    if np.linalg.norm(r) == 0:
        z, lam = np.zeros(V.shape[1], dtype=complex), 0.0
    else:
        z, lam = _trust_region_ls(Gm @ V, r, radius, float(np.sum(np.abs(Gm) ** 2)))
    w = w0 + V @ z
    residual = float(np.linalg.norm(Gm @ w - b) ** 2)
    wng = abs(w @ d) ** 2 / float(np.vdot(w, w).real)
    return NarrowbandWeights(G.freq_hz, w, float(lam), residual, wng)


def design_broadband(spec: DesignSpec, geom: ArrayGeometry) -> list[NarrowbandWeights]:
    mats = steering_matrices(spec.model, geom, spec.directions, spec.look, spec.grid.freqs_hz)
    out = []
    for p, G in enumerate(mats):
        try:
            out.append(solve_narrowband(G, spec.desired, spec.gamma_linear))
        except InfeasibleWngError as exc:
            raise InfeasibleWngError(exc.gamma_linear, exc.max_wng, p, G.freq_hz) from None
    return out


@dataclass(frozen=True, eq=False)
class FirBeamformer:
    taps: np.ndarray
    sample_rate_hz: float
    spec_digest: str = ""
    fit_error: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        taps = np.array(self.taps, dtype=float)
        if taps.ndim != 2 or taps.shape[1] < 2:
            raise ValueError("taps must be an N x L matrix with L >= 2")
        if not np.all(np.isfinite(taps)):
            raise ValueError("FIR taps must be finite")
        taps.setflags(write=False)
        object.__setattr__(self, "taps", taps)

    @property
    def num_channels(self) -> int:
        return self.taps.shape[0]

    @property
    def length(self) -> int:
        return self.taps.shape[1]

    @property
    def group_delay_samples(self) -> float:
        return (self.length - 1) / 2

    def response(self, freqs_hz) -> np.ndarray:
        """Channel DTFTs W_n(omega), shape ``(F, N)``."""
        omega = 2 * np.pi * np.asarray(freqs_hz, dtype=float) / self.sample_rate_hz
        kernel = np.exp(-1j * np.outer(omega, np.arange(self.length)))
        return kernel @ self.taps.T

    def to_dict(self) -> dict:
        return {
            "sample_rate_hz": self.sample_rate_hz,
            "L": self.length,
            "taps": self.taps.tolist(),
            "group_delay_samples": self.group_delay_samples,
            "spec_digest": self.spec_digest,
            "fit_error": list(self.fit_error),
        }

    @classmethod
    def from_dict(cls, data) -> "FirBeamformer":
        try:
            taps = np.array(data["taps"], dtype=float)
            fs = float(data["sample_rate_hz"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed beamformer data ({exc})") from None
        if "L" in data and taps.ndim == 2 and taps.shape[1] != int(data["L"]):
            raise ValueError("tap count disagrees with L")
        return cls(taps, fs, str(data.get("spec_digest", "")), tuple(data.get("fit_error", ())))


def save_beamformer(bf: FirBeamformer, path):
    Path(path).write_text(json.dumps(bf.to_dict()) + "\n")


def load_beamformer(path) -> FirBeamformer:
    return FirBeamformer.from_dict(load_json_strict(path))


def fit_support(length, num_freqs):
    """Tap indices that are fitted; the rest stay zero.

    With fewer real equations than taps the LS fit is underdetermined. The
    fitted taps are then restricted to a block centred on the group delay,
    which keeps the realized response smooth between design frequencies.
    """
    width = min(length, max(2 * (num_freqs - 1), 2))
    start = int(math.floor((length - width) / 2))
    return np.arange(start, start + width)


def fir_approximation(weights, length, grid: FrequencyGrid, spec_digest="") -> FirBeamformer:
    """Weighted LS fit of real FIR taps to the narrowband weights.

    Targets are ``W_n(omega_p) * exp(-j omega_p tau)`` with ``tau = (L-1)/2``;
    frequencies outside the grid's pass-band get weight 0.01.
    """
    if len(weights) < 2:
        raise ValueError("FIR fitting needs at least two design frequencies")
    freqs = grid.freqs_hz
    if len(weights) != freqs.size:
        raise ValueError("one narrowband solution per grid frequency required")
    W = np.array([nb.w for nb in weights])  # (P, N)
    omega = 2 * np.pi * freqs / grid.sample_rate_hz
    tau = (length - 1) / 2
    target = W * np.exp(-1j * omega * tau)[:, None]
    q = np.where(grid.in_band(), 1.0, DONT_CARE_WEIGHT)
    sq = np.sqrt(q)[:, None]

    support = fit_support(length, freqs.size)
    basis = np.exp(-1j * np.outer(omega, support))
    A = np.vstack([sq * basis.real, sq * basis.imag])
    rhs = np.vstack([sq * target.real, sq * target.imag])
    sol, *_ = linalg.lstsq(A, rhs)
    taps = np.zeros((W.shape[1], length))
    taps[:, support] = sol.T

    err = A @ sol - rhs
    scale = np.linalg.norm(rhs, axis=0)
    fit_error = tuple(float(e / s) if s > 0 else 0.0 for e, s in zip(np.linalg.norm(err, axis=0), scale))
    log.debug("FIR fit relative errors: %s", fit_error)
    return FirBeamformer(taps, grid.sample_rate_hz, spec_digest, fit_error)


def design_fir(spec: DesignSpec, geom: ArrayGeometry):
    """Narrowband design followed by the FIR fit; returns ``(beamformer, narrowband)``."""
    nb = design_broadband(spec, geom)
    return fir_approximation(nb, spec.fir_length, spec.grid, spec.digest()), nb
