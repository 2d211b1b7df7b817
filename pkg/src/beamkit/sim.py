"""Two-speaker simulation: render, filter-and-sum, score, and sweep steering errors."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal as sps

from .design import DesignSpec, FirBeamformer, desired_response, design_fir
from .spatial import ArrayGeometry, Direction, SourcePosition, elevated_source
from .steering import FreeField, HrtfSet, RigidSphere, synthesize_freefield_hrtf_set, synthesize_sphere_hrtf_set

log = logging.getLogger(__name__)

DOA_ERRORS = (-10.0, -5.0, 0.0, 5.0, 10.0)
AVERAGE_INTERFERERS = (10.0, 30.0, 50.0, 70.0, 110.0, 130.0, 150.0, 170.0)
SOURCE_HEIGHT_M = 0.73

# white noise through this all-pole filter gives a speech-like low-pass tilt
_TILT_A = (1.0, -1.3, 0.4)


def speech_shaped_noise(num_samples, seed) -> np.ndarray:
    rng = np.random.default_rng(seed)
    x = sps.lfilter([1.0], _TILT_A, rng.standard_normal(num_samples))
    return x / np.sqrt(np.mean(x**2))


@dataclass(frozen=True, eq=False)
class Scenario:
    target: SourcePosition
    interferer: SourcePosition
    target_signal: np.ndarray
    interferer_signal: np.ndarray
    sample_rate_hz: float = 16000.0
    sir_in_db: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if len(self.target_signal) == 0 or len(self.interferer_signal) == 0:
            raise ValueError("scenario signals must be non-empty")

    @classmethod
    def synthetic(cls, target, interferer, fs=16000.0, duration_s=5.0, sir_in_db=0.0, seed=0):
        n = int(round(duration_s * fs))
        return cls(target, interferer, speech_shaped_noise(n, seed), speech_shaped_noise(n, seed + 1),
                   fs, sir_in_db, seed)

    def moved(self, target=None, interferer=None) -> "Scenario":
        return replace(self, target=target or self.target, interferer=interferer or self.interferer)

    def to_dict(self, duration_s=None) -> dict:
        def pos(p):
            return {"az": p.direction.azimuth_deg, "el": p.direction.elevation_polar_deg, "dist": p.distance_m}
        return {
            "target": pos(self.target),
            "interferer": pos(self.interferer),
            "sir_in_db": self.sir_in_db,
            "seed": self.seed,
            "duration_s": duration_s if duration_s is not None else len(self.target_signal) / self.sample_rate_hz,
        }


def scenario_from_dict(data, fs=16000.0) -> Scenario:
    def pos(p):
        return SourcePosition(Direction(p["az"], p["el"]), float(p["dist"]))
    try:
        return Scenario.synthetic(pos(data["target"]), pos(data["interferer"]), fs,
                                  float(data.get("duration_s", 5.0)), float(data.get("sir_in_db", 0.0)),
                                  int(data.get("seed", 0)))
    except (KeyError, TypeError) as exc:
        raise ValueError(f"malformed scenario ({exc})") from None


def two_talker_scenario(interferer_az, horizontal_distance_m=1.1, **kw) -> Scenario:
    """Target at broadside, interferer at ``interferer_az``, both 0.73 m above the head plane."""
    return Scenario.synthetic(elevated_source(90.0, horizontal_distance_m, SOURCE_HEIGHT_M),
                              elevated_source(interferer_az, horizontal_distance_m, SOURCE_HEIGHT_M), **kw)


# -- signal flow ------------------------------------------------------------

def source_hrirs(acoustics, geom: ArrayGeometry, src: SourcePosition, fs=16000.0, length=256) -> np.ndarray:
    """Per-mic impulse responses for one source position, shape ``(N, T)``."""
    if isinstance(acoustics, HrtfSet):
        if acoustics.mic_count != geom.num_mics:
            raise ValueError("HRTF set and geometry disagree on the number of mics")
        return acoustics.hrir(src.direction)
    if isinstance(acoustics, RigidSphere):
        return synthesize_sphere_hrtf_set(geom, acoustics.radius_m, src.distance_m, [src.direction], fs, length,
                                          acoustics.max_order, acoustics.c).hrirs[0]
    if isinstance(acoustics, FreeField):
        return synthesize_freefield_hrtf_set(geom, src.distance_m, [src.direction], fs, length, acoustics.c).hrirs[0]
    raise TypeError(f"unsupported acoustic model {acoustics!r}")


def render_source(acoustics, geom, src: SourcePosition, sig, fs=16000.0) -> np.ndarray:
    """Microphone images of one source: ``signal * hrir_n`` for every mic."""
    h = source_hrirs(acoustics, geom, src, fs)
    sig = np.asarray(sig, dtype=float)
    return sps.fftconvolve(h, sig[None, :], axes=1)


def fsb_process(bf: FirBeamformer, x) -> np.ndarray:
    """Filter-and-sum: ``y = sum_n w_n * x_n``."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] != bf.num_channels:
        raise ValueError(f"beamformer has {bf.num_channels} channels, input has {x.shape[0]}")
    return sps.fftconvolve(bf.taps, x, axes=1).sum(axis=0)


@dataclass(frozen=True, eq=False)
class ShadowOutput:
    target: np.ndarray
    interferer: np.ndarray

    @property
    def mixture(self) -> np.ndarray:
        return self.target + self.interferer


def shadow_decompose(bf: FirBeamformer, target_x, interferer_x) -> ShadowOutput:
    """Filter the target and interferer images separately through the same beamformer."""
    return ShadowOutput(fsb_process(bf, target_x), fsb_process(bf, interferer_x))


def energy_ratio_db(a, b) -> float:
    return 10 * math.log10(float(np.sum(np.square(a))) / float(np.sum(np.square(b))))


# -- frequency-weighted segmental SNR ---------------------------------------

def mel_filterbank(fs, nfft, num_bands=25, f_low=50.0, f_high=None) -> np.ndarray:
    """Triangular filters on a mel scale, shape ``(num_bands, nfft//2 + 1)``."""
    f_high = fs / 2 if f_high is None else f_high

    def mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    def hz(m):
        return 700.0 * (10 ** (m / 2595.0) - 1.0)

    edges = hz(np.linspace(mel(f_low), mel(f_high), num_bands + 2))
    bins = np.arange(nfft // 2 + 1) * fs / nfft
    fb = np.zeros((num_bands, bins.size))
    for j in range(num_bands):
        lo, mid, hi = edges[j], edges[j + 1], edges[j + 2]
        rise = (bins - lo) / (mid - lo)
        fall = (hi - bins) / (hi - mid)
        fb[j] = np.clip(np.minimum(rise, fall), 0.0, None)
    return fb


def fwsegsnr_from_bands(ref_bands, test_bands, gamma=0.2, snr_min=-10.0, snr_max=35.0) -> float:
    """Weighted segmental SNR from band magnitudes of shape ``(frames, bands)``."""
    ref = np.asarray(ref_bands, dtype=float)
    test = np.asarray(test_bands, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        snr = 10 * np.log10(ref**2 / (ref - test) ** 2)
    snr = np.where(ref - test == 0, snr_max, snr)
    snr = np.clip(np.nan_to_num(snr, nan=snr_min), snr_min, snr_max)
    weight = ref**gamma
    wsum = weight.sum(axis=1)
    keep = wsum > 0
    if not keep.any():
        raise ValueError("reference has no energy in any frame")
    return float(np.mean(np.sum(weight * snr, axis=1)[keep] / wsum[keep]))


def _band_magnitudes(x, fs, frame_len, hop, nfft, fb):
    win = sps.get_window("hann", frame_len)
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop]
    return np.abs(np.fft.rfft(frames * win, n=nfft, axis=1)) @ fb.T


def fwsegsnr(reference, test, fs, frame_s=0.025, hop_s=0.010, num_bands=25) -> float:
    """Frequency-weighted segmental SNR of ``test`` against ``reference`` in dB.

    Per frame and band the SNR is clamped to [-10, 35] dB and weighted by the
    reference band magnitude to the power 0.2.
    """
    reference = np.asarray(reference, dtype=float)
    test = np.asarray(test, dtype=float)
    if reference.shape != test.shape:
        raise ValueError("reference and test must have equal length")
    if not np.any(reference):
        raise ValueError("reference signal is all zero")
    frame_len = int(round(frame_s * fs))
    hop = int(round(hop_s * fs))
    if reference.size < frame_len:
        raise ValueError("signal shorter than one frame")
    nfft = 1 << int(math.ceil(math.log2(2 * frame_len)))
    fb = mel_filterbank(fs, nfft, num_bands)
    return fwsegsnr_from_bands(_band_magnitudes(reference, fs, frame_len, hop, nfft, fb),
                               _band_magnitudes(test, fs, frame_len, hop, nfft, fb))


# -- evaluation of one design -----------------------------------------------

@dataclass(frozen=True, eq=False)
class RenderedScene:
    target_x: np.ndarray
    interferer_x: np.ndarray
    dry_target: np.ndarray
    bulk_delay: int
    reference_mic: int
    sample_rate_hz: float


def render_scene(acoustics, geom: ArrayGeometry, scenario: Scenario) -> RenderedScene:
    """Mic images of both sources, interferer scaled to the scenario's input SIR at the reference mic."""
    fs = scenario.sample_rate_hz
    if isinstance(acoustics, HrtfSet) and acoustics.sample_rate_hz != fs:
        raise ValueError("HRTF set sample rate differs from the scenario")
    tx = render_source(acoustics, geom, scenario.target, scenario.target_signal, fs)
    ix = render_source(acoustics, geom, scenario.interferer, scenario.interferer_signal, fs)
    n = max(tx.shape[1], ix.shape[1])
    tx = np.pad(tx, ((0, 0), (0, n - tx.shape[1])))
    ix = np.pad(ix, ((0, 0), (0, n - ix.shape[1])))
    ref = geom.reference_mic
    gain = 10 ** ((energy_ratio_db(tx[ref], ix[ref]) - scenario.sir_in_db) / 20)
    bulk = acoustics.bulk_delay_samples if isinstance(acoustics, HrtfSet) else 256 // 4
    return RenderedScene(tx, ix * gain, np.asarray(scenario.target_signal, float), bulk, ref, fs)


def band_distortion_db(output, dry, delay, fs, band=(300.0, 5000.0)) -> float:
    """In-band error of ``output`` against ``dry`` delayed by ``delay`` samples (may be fractional)."""
    n = 1 << int(math.ceil(math.log2(len(output) + len(dry))))
    f = np.fft.rfftfreq(n, 1 / fs)
    Y = np.fft.rfft(output, n)
    D = np.fft.rfft(dry, n) * np.exp(-2j * np.pi * f * delay / fs)
    sel = (f >= band[0]) & (f <= band[1])
    return 10 * math.log10(np.sum(np.abs(Y[sel] - D[sel]) ** 2) / np.sum(np.abs(D[sel]) ** 2))


def evaluate(bf: FirBeamformer, scene: RenderedScene, band=(300.0, 5000.0)) -> dict:
    """Metrics of one beamformer on one rendered scene."""
    ref = scene.reference_mic
    fs = scene.sample_rate_hz
    out = shadow_decompose(bf, scene.target_x, scene.interferer_x)
    t_in, i_in = scene.target_x[ref], scene.interferer_x[ref]
    sir_in = energy_ratio_db(t_in, i_in)
    sir_out = energy_ratio_db(out.target, out.interferer)
    return {
        "sir_gain_db": sir_out - sir_in,
        "fwsegsnr_in_db": fwsegsnr(t_in, t_in + i_in, fs),
        "fwsegsnr_out_db": fwsegsnr(out.target, out.mixture, fs),
        "distortion_db": band_distortion_db(out.target, scene.dry_target,
                                            bf.group_delay_samples + scene.bulk_delay, fs, band),
    }


# -- sweeps -----------------------------------------------------------------

METRIC_COLUMNS = ("sir_gain_db", "fwsegsnr_in_db", "fwsegsnr_out_db", "distortion_db")
REPORT_COLUMNS = ("design", "steer_azimuth_deg", "distance_m", "error_label") + METRIC_COLUMNS


@dataclass
class SweepReport:
    rows: list = field(default_factory=list)
    seed: int = 0

    def column(self, name, **where) -> np.ndarray:
        rows = [r for r in self.rows if all(r.get(k) == v for k, v in where.items())]
        return np.array([r[name] for r in rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(REPORT_COLUMNS)
        for r in self.rows:
            wr.writerow([_fmt(r[c]) for c in REPORT_COLUMNS])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "columns": list(REPORT_COLUMNS), "rows": self.rows}, indent=1) + "\n"

    def table(self) -> str:
        head = f"{'design':>10} {'steer':>6} {'dist':>5} {'error':>8} {'SIRgain':>8} {'fwSNRin':>8} {'fwSNRout':>8} {'dist_dB':>8}"
        lines = [head]
        for r in self.rows:
            lines.append(
                f"{r['design']:>10} {r['steer_azimuth_deg']:6.1f} {r['distance_m']:5.2f} {r['error_label']:>8} "
                f"{r['sir_gain_db']:8.2f} {r['fwsegsnr_in_db']:8.2f} {r['fwsegsnr_out_db']:8.2f} {r['distortion_db']:8.2f}"
            )
        return "\n".join(lines)


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def report_from_json(text) -> SweepReport:
    data = json.loads(text)
    return SweepReport(data["rows"], data.get("seed", 0))


def horizontal_distance(src: SourcePosition) -> float:
    return src.distance_m * math.sin(math.radians(src.direction.elevation_polar_deg))


def _error_label(err):
    return f"{err:+g}deg" if err else "0deg"


class _DesignCache:
    """Designs keyed by (label, steering direction); sweep points reuse them across scenarios."""

    def __init__(self, geom):
        self.geom = geom
        self._store = {}

    def get(self, label, spec: DesignSpec, steer: Direction) -> FirBeamformer:
        key = (label, spec.digest(), round(steer.azimuth_deg, 9), round(steer.elevation_polar_deg, 9))
        if key not in self._store:
            s = replace(spec, look=steer, desired=desired_response(spec.directions, steer))
            self._store[key] = design_fir(s, self.geom)[0]
        return self._store[key]


def doa_error_sweep(specs, geom, acoustics, scenario: Scenario, errors_deg=DOA_ERRORS, cache=None) -> SweepReport:
    """Steer the design to ``target azimuth + error`` while rendering at the true positions.

    ``specs`` maps a design label (e.g. ``"hrtf"``) to a :class:`DesignSpec`,
    or is a single spec. The steering polar angle is taken from each spec's look direction.
    """
    if isinstance(specs, DesignSpec):
        specs = {getattr(specs.model, "name", "design"): specs}
    cache = cache or _DesignCache(geom)
    scene = render_scene(acoustics, geom, scenario)
    report = SweepReport(seed=scenario.seed)
    for label, spec in specs.items():
        for err in errors_deg:
            steer = Direction(scenario.target.direction.azimuth_deg + err, spec.look.elevation_polar_deg)
            bf = cache.get(label, spec, steer)
            row = {"design": label, "steer_azimuth_deg": steer.azimuth_deg,
                   "distance_m": horizontal_distance(scenario.target), "error_label": _error_label(err)}
            row.update(evaluate(bf, scene))
            log.debug("doa %s steer %.1f: %s", label, steer.azimuth_deg, row)
            report.rows.append(row)
    return report


def average_reports(reports, keys=("design", "steer_azimuth_deg", "error_label")) -> SweepReport:
    """Average metric columns over reports sharing the same row keys, keeping first-seen order."""
    groups = {}
    for rep in reports:
        for r in rep.rows:
            groups.setdefault(tuple(r[k] for k in keys), []).append(r)
    rows = []
    for rs in groups.values():
        row = {k: rs[0][k] for k in REPORT_COLUMNS if k not in METRIC_COLUMNS}
        row.update({m: float(np.mean([r[m] for r in rs])) for m in METRIC_COLUMNS})
        rows.append(row)
    return SweepReport(rows, reports[0].seed if reports else 0)


def worker_count() -> int:
    """Parallelism cap from BEAMKIT_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("BEAMKIT_THREADS", "1")))
    except ValueError:
        return 1


def averaged_doa_sweep(specs, geom, acoustics, base: Scenario, interferers=AVERAGE_INTERFERERS,
                       errors_deg=DOA_ERRORS) -> SweepReport:
    """DOA sweep averaged over interferer azimuths, target fixed."""
    if isinstance(specs, DesignSpec):
        specs = {getattr(specs.model, "name", "design"): specs}
    cache = _DesignCache(geom)
    # designs do not depend on the interferer: build them once, serially
    for label, spec in specs.items():
        for err in errors_deg:
            cache.get(label, spec, Direction(base.target.direction.azimuth_deg + err, spec.look.elevation_polar_deg))

    def run(az):
        intf = SourcePosition(Direction(az, base.interferer.direction.elevation_polar_deg), base.interferer.distance_m)
        return doa_error_sweep(specs, geom, acoustics, base.moved(interferer=intf), errors_deg, cache)

    with ThreadPoolExecutor(max_workers=worker_count()) as pool:
        reports = list(pool.map(run, interferers))
    return average_reports(reports)


def distance_error_sweep(specs, geom, acoustic_sets: dict, scenario: Scenario, height_m=SOURCE_HEIGHT_M,
                         interferers=None, cache=None) -> SweepReport:
    """Evaluate fixed designs with sources moved to each horizontal distance in ``acoustic_sets``.

    Sources keep their azimuths and are placed ``height_m`` above the head, so
    a change of distance also changes their polar angle. Each design keeps
    the look direction of its spec. With ``interferers`` the scores are
    averaged over those interferer azimuths.
    """
    if isinstance(specs, DesignSpec):
        specs = {getattr(specs.model, "name", "design"): specs}
    cache = cache or _DesignCache(geom)
    az_list = list(interferers) if interferers else [scenario.interferer.direction.azimuth_deg]
    report = SweepReport(seed=scenario.seed)
    for dist, acoustics in acoustic_sets.items():
        target = elevated_source(scenario.target.direction.azimuth_deg, dist, height_m)
        scenes = [render_scene(acoustics, geom, scenario.moved(target, elevated_source(az, dist, height_m)))
                  for az in az_list]
        for label, spec in specs.items():
            bf = cache.get(label, spec, spec.look)
            metrics = [evaluate(bf, s) for s in scenes]
            row = {"design": label, "steer_azimuth_deg": spec.look.azimuth_deg, "distance_m": float(dist),
                   "error_label": f"{target.direction.elevation_polar_deg - spec.look.elevation_polar_deg:+.1f}deg_el"}
            row.update({m: float(np.mean([x[m] for x in metrics])) for m in METRIC_COLUMNS})
            log.debug("distance %s d=%.2f: %s", label, dist, row)
            report.rows.append(row)
    return report
