"""beamkit command line: design, analyse and simulate robust LS beamformers.

Exit codes: 0 success, 1 internal error, 2 user or configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import analysis, design, sim, spatial, steering

log = logging.getLogger("beamkit")


class UserError(Exception):
    pass


def _existing(path):
    if path is None:
        return None
    if not Path(path).is_file():
        raise UserError(f"file not found: {path}")
    return path


def _geometry(args):
    if args.geometry:
        return spatial.load_geometry(_existing(args.geometry))
    return spatial.default_geometry()


def _model(args, geom):
    if args.model == "freefield":
        return steering.FreeField(args.c)
    if args.model == "sphere":
        return steering.RigidSphere(args.radius, args.distance, args.max_order, args.c)
    if args.model == "hrtf":
        if not args.hrtf:
            raise UserError("--model hrtf needs --hrtf PATH")
        hset = steering.load_hrtf_set(_existing(args.hrtf))
        if hset.sample_rate_hz != args.fs:
            raise UserError(f"HRTF set sample rate {hset.sample_rate_hz} differs from --fs {args.fs}")
        return hset
    raise UserError(f"unknown model {args.model}")


def _spec(args, model):
    grid = design.FrequencyGrid.uniform(args.fs, args.num_freqs, tuple(args.band))
    look = spatial.Direction(args.look_az, args.look_el)
    dirs = spatial.direction_grid(args.az_step, args.look_el, (0.0, 180.0))
    return design.DesignSpec(grid, dirs, look, args.gamma_db, args.fir_length, model)


def _outdir(args) -> Path:
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- subcommands ------------------------------------------------------------

def cmd_design(args):
    geom = _geometry(args)
    spec = _spec(args, _model(args, geom))
    bf, nb = design.design_fir(spec, geom)
    out = _outdir(args)
    lines = ["freq_hz,residual,lambda,wng_db"]
    lines += [f"{x.freq_hz!r},{x.residual!r},{x.lam!r},{x.wng_db!r}" for x in nb]
    for line in lines:
        log.info("%s", line)
    (out / "narrowband.csv").write_text("\n".join(lines) + "\n")
    design.save_beamformer(bf, out / "beamformer.json")
    if args.wav:
        wavfile.write(out / "beamformer.wav", int(args.fs), np.ascontiguousarray(bf.taps.T, dtype=np.float64))
    log.info("wrote %s (N=%d, L=%d, digest %s)", out / "beamformer.json", bf.num_channels, bf.length, bf.spec_digest)


def _analysis_inputs(args):
    geom = _geometry(args)
    model = _model(args, geom)
    bf = design.load_beamformer(_existing(args.beamformer))
    if bf.num_channels != geom.num_mics:
        raise UserError(f"beamformer has {bf.num_channels} channels, geometry has {geom.num_mics} mics")
    freqs = np.linspace(args.f_min, args.f_max, args.num_points)
    return geom, model, bf, freqs


def cmd_beampattern(args):
    geom, model, bf, freqs = _analysis_inputs(args)
    dirs = spatial.direction_grid(args.bp_step, args.look_el, (0.0, 180.0))
    bp = analysis.beampattern(bf, model, geom, dirs, freqs)
    path = _outdir(args) / "beampattern.csv"
    analysis.write_beampattern_csv(bp, path)
    log.info("wrote %s (%d freqs x %d azimuths)", path, len(freqs), len(dirs))


def cmd_wng(args):
    geom, model, bf, freqs = _analysis_inputs(args)
    curve = analysis.wng_curve(bf, model, geom, spatial.Direction(args.look_az, args.look_el), freqs)
    path = _outdir(args) / "wng.csv"
    analysis.write_wng_csv(curve, path)
    log.info("wrote %s; min WNG %.2f dB", path, curve.wng_db.min())


def _synth_set(geom, args, distance, polar):
    dirs = spatial.direction_grid(args.az_step, polar, (0.0, 360.0 - args.az_step))
    return steering.synthesize_sphere_hrtf_set(geom, args.radius, distance, dirs, args.fs, args.length, args.max_order, args.c)


def cmd_synth_hrtf(args):
    geom = _geometry(args)
    out = _outdir(args)
    for d in args.distances or [1.1]:
        if args.height is not None:
            src = spatial.elevated_source(90.0, d, args.height)
            distance, polar = src.distance_m, src.direction.elevation_polar_deg
        else:
            distance, polar = d, args.polar
        hset = _synth_set(geom, args, distance, polar)
        path = out / f"hrtf_{d:g}m.json"
        steering.save_hrtf_set(hset, path)
        log.info("wrote %s (%d directions, polar %.2f deg, range %.3f m)", path, len(hset.directions), polar, distance)


def _head_sets(geom, args, distances):
    sets = {}
    for d in distances:
        src = spatial.elevated_source(90.0, d, args.height)
        sets[d] = _synth_set(geom, args, src.distance_m, src.direction.elevation_polar_deg)
    return sets


def _scenario(args):
    if args.scenario:
        data = spatial.load_json_strict(_existing(args.scenario))
        return sim.scenario_from_dict(data, args.fs)
    return sim.two_talker_scenario(args.interferer_az, 1.1, fs=args.fs, duration_s=args.duration, seed=args.seed)


def _sweep_specs(args, geom, design_set):
    scen_polar = spatial.elevated_source(90.0, 1.1, args.height).direction.elevation_polar_deg
    grid = design.FrequencyGrid.uniform(args.fs, args.num_freqs, tuple(args.band))
    dirs = spatial.direction_grid(args.az_step, scen_polar, (0.0, 180.0))
    look = spatial.Direction(90.0, scen_polar)
    models = {"hrtf": design_set, "freefield": steering.FreeField(args.c)}
    return {m: design.DesignSpec(grid, dirs, look, args.gamma_db, args.fir_length, models[m])
            for m in (args.designs or ["hrtf"])}


def cmd_simulate(args):
    geom = _geometry(args)
    scen = _scenario(args)
    acoustics = steering.load_hrtf_set(_existing(args.hrtf)) if args.hrtf else _head_sets(geom, args, [1.1])[1.1]
    bf = design.load_beamformer(_existing(args.beamformer))
    scene = sim.render_scene(acoustics, geom, scen)
    metrics = sim.evaluate(bf, scene)
    out = _outdir(args)
    (out / "metrics.json").write_text(json.dumps(metrics, indent=1) + "\n")
    if args.wav:
        res = sim.shadow_decompose(bf, scene.target_x, scene.interferer_x)
        wavfile.write(out / "output.wav", int(scen.sample_rate_hz), res.mixture)
    for k, v in metrics.items():
        log.info("%s = %.3f", k, v)


def cmd_sweep(args):
    geom = _geometry(args)
    scen = _scenario(args)
    if args.mode == "doa":
        if args.hrtf:
            acoustics = steering.load_hrtf_set(_existing(args.hrtf))
        else:
            acoustics = _head_sets(geom, args, [1.1])[1.1]
        specs = _sweep_specs(args, geom, acoustics)
        if args.average:
            report = sim.averaged_doa_sweep(specs, geom, acoustics, scen)
        else:
            report = sim.doa_error_sweep(specs, geom, acoustics, scen)
    else:
        sets = _head_sets(geom, args, [1.1, 2.0])
        specs = _sweep_specs(args, geom, sets[1.1])
        interferers = sim.AVERAGE_INTERFERERS if args.average else None
        report = sim.distance_error_sweep(specs, geom, sets, scen, args.height, interferers)
    report.seed = args.seed if not args.scenario else scen.seed
    out = _outdir(args)
    (out / "sweep.csv").write_text(report.to_csv())
    (out / "sweep.json").write_text(report.to_json())
    print(report.table(), file=sys.stderr)


# -- argument parsing -------------------------------------------------------

def _common(p, model=True):
    p.add_argument("--config", help="JSON file whose keys override individual flags")
    p.add_argument("--geometry", help="geometry JSON (default: built-in 5-mic head)")
    p.add_argument("--out-dir", default=".")
    p.add_argument("--fs", type=float, default=16000.0)
    p.add_argument("--c", type=float, default=spatial.SPEED_OF_SOUND, help="speed of sound, m/s")
    p.add_argument("--radius", type=float, default=0.06, help="sphere radius, m")
    p.add_argument("--max-order", type=int, default=80)
    p.add_argument("--look-az", type=float, default=90.0)
    p.add_argument("--look-el", type=float, default=90.0, help="polar angle from +z, deg")
    if model:
        p.add_argument("--model", choices=["freefield", "sphere", "hrtf"], default="freefield")
        p.add_argument("--hrtf", help="HRTF set JSON for --model hrtf")
        p.add_argument("--distance", type=float, default=1.32, help="source range for --model sphere, m")


def _design_opts(p):
    p.add_argument("--gamma-db", type=float, default=-10.0)
    p.add_argument("--num-freqs", type=int, default=129)
    p.add_argument("--band", type=float, nargs=2, default=[300.0, 5000.0])
    p.add_argument("--fir-length", type=int, default=1024)
    p.add_argument("--az-step", type=float, default=5.0)


def _sim_opts(p):
    p.add_argument("--scenario", help="scenario JSON {target, interferer, sir_in_db, seed, duration_s}")
    p.add_argument("--interferer-az", type=float, default=70.0)
    p.add_argument("--duration", type=float, default=5.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=float, default=sim.SOURCE_HEIGHT_M)
    p.add_argument("--length", type=int, default=256, help="HRIR length of synthesized sets")


def build_parser():
    parser = argparse.ArgumentParser(prog="beamkit", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("design", help="design an FIR beamformer")
    _common(p)
    _design_opts(p)
    p.add_argument("--wav", action="store_true", help="also export taps as a 64-bit float WAV")
    p.set_defaults(func=cmd_design)

    for name, func in (("beampattern", cmd_beampattern), ("wng", cmd_wng)):
        p = sub.add_parser(name, help=f"evaluate the {name} of a designed beamformer")
        _common(p)
        p.add_argument("--beamformer", required=True)
        p.add_argument("--f-min", type=float, default=300.0)
        p.add_argument("--f-max", type=float, default=5000.0)
        p.add_argument("--num-points", type=int, default=512)
        p.add_argument("--bp-step", type=float, default=1.0, help="azimuth step of the pattern grid")
        p.set_defaults(func=func)

    p = sub.add_parser("synth-hrtf", help="synthesize rigid-sphere HRTF sets")
    _common(p, model=False)
    p.add_argument("--distance", dest="distances", type=float, action="append",
                   help="source distance, m (repeatable); horizontal when --height is given")
    p.add_argument("--height", type=float, default=None, help="source height above the head, m")
    p.add_argument("--polar", type=float, default=90.0, help="polar angle when --height is not given")
    p.add_argument("--az-step", type=float, default=5.0)
    p.add_argument("--length", type=int, default=256)
    p.set_defaults(func=cmd_synth_hrtf)

    p = sub.add_parser("simulate", help="score one beamformer on one two-speaker scenario")
    _common(p, model=False)
    _sim_opts(p)
    p.add_argument("--beamformer", required=True)
    p.add_argument("--hrtf", help="acoustic HRTF set (default: synthesized sphere set at 1.1 m)")
    p.add_argument("--az-step", type=float, default=5.0)
    p.add_argument("--wav", action="store_true")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sweep", help="localization-error sweeps")
    _common(p, model=False)
    _design_opts(p)
    _sim_opts(p)
    p.add_argument("--mode", choices=["doa", "distance"], default="doa")
    p.add_argument("--average", action="store_true", help="average over the 8-interferer protocol")
    p.add_argument("--design", dest="designs", action="append", choices=["hrtf", "freefield"],
                   help="design backend(s) to evaluate (repeatable, default hrtf)")
    p.add_argument("--hrtf", help="HRTF set used for acoustics and the hrtf design (doa mode)")
    p.set_defaults(func=cmd_sweep)
    return parser


def _apply_config(args):
    if not getattr(args, "config", None):
        return args
    data = spatial.load_json_strict(_existing(args.config))
    for key, value in data.items():
        dest = key.replace("-", "_")
        if not hasattr(args, dest):
            raise UserError(f"unknown config key {key!r}")
        setattr(args, dest, value)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    try:
        _apply_config(args)
        args.func(args)
    except design.InfeasibleWngError as exc:
        log.error("%s", exc)
        return 2
    except (UserError, ValueError, LookupError, OSError) as exc:
        log.error("%s", exc)
        return 2
    except Exception:
        log.exception("internal error")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
