"""Command-line entry point.

Exit codes: 0 success, 2 invalid input, 3 I/O failure, 4 non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import os
import sys
import time
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np
import tomlkit

from . import __version__
from .exceptions import ConvergenceError, NVChargeError, ValidationError
from .fitting import fit_double_lorentzian, fit_ensemble, fit_single_nv
from .io import (
    DEFAULT_CONFIG,
    PRESETS,
    ResultEnvelope,
    dump_config,
    load_config,
    merge_config,
    read_curve,
    read_envelope,
    read_spectrum,
    write_cloud,
    write_envelope,
    write_plot_data,
    write_spectrum,
)
from .localization import (
    NVOrientation,
    WireGeometry,
    confidence_region,
    fit_imbalance_curve,
    microwave_polarization,
    mw_angle_uncertainty,
    reconstruct_field,
)
from .spectra import EnsembleSimConfig, FrequencyGrid, Spectrum, ensemble_spectrum
from .spin import NVConstants

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_CONVERGENCE = 0, 2, 3, 4
OUTPUT_ENV = "NVCHARGE_OUTPUT_DIR"
COMMANDS = ("simulate", "fit-ensemble", "fit-single", "imbalance", "localize", "mw-angle")


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _parse_value(text: str):
    try:
        return tomlkit.parse(f"v = {text}").unwrap()["v"]
    except Exception:
        return text


def _override(config: dict, assignment: str) -> dict:
    key, sep, value = assignment.partition("=")
    if not sep:
        raise ValidationError(f"--set expects key=value, got {assignment!r}")
    patch = node = {}
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = _parse_value(value.strip())
    return merge_config(config, patch)


def resolve_config(args) -> dict:
    config = load_config(args.config) if args.config else merge_config(DEFAULT_CONFIG, {})
    if args.preset:
        config["sample"] = dict(PRESETS[args.preset])
    for assignment in args.set or []:
        config = _override(config, assignment)
    if args.seed is not None:
        config["seed"] = args.seed
    if args.realizations:
        nc, _, ns = args.realizations.lower().partition("x")
        try:
            mc = {"n_charge_realizations": int(nc)}
            if ns:
                mc["n_spin_realizations"] = int(ns)
        except ValueError:
            raise ValidationError("--realizations expects N or NCxNS") from None
        config = merge_config(config, {"monte_carlo": mc})
    _validate(config)
    return config


def _validate(config: dict):
    s, mc = config["sample"], config["monte_carlo"]
    if s["rho_c"] < 0 or s["rho_s"] < 0 or s["gamma"] < 0:
        raise ValidationError("sample densities and gamma must be non-negative")
    if mc["n_charge_realizations"] < 1 or mc["n_spin_realizations"] < 1:
        raise ValidationError("realization counts must be at least 1")
    sim = config["simulate"]
    if sim["half_width"] <= 0 or sim["step"] <= 0 or sim["noise"] < 0:
        raise ValidationError("simulate grid and noise settings must be positive")
    fe = config["fit_ensemble"]
    if not 0 < fe["grid_low"] < fe["grid_high"] or fe["grid_points"] < 2:
        raise ValidationError("fit_ensemble grid needs 0 < grid_low < grid_high and >= 2 points")
    loc = config["localize"]
    if loc["charge_sign"] not in (1, -1) or len(loc["errors"]) != 3:
        raise ValidationError("localize needs charge_sign +-1 and three errors")


def _sim_config(config) -> EnsembleSimConfig:
    mc = config["monte_carlo"]
    return EnsembleSimConfig(mc["n_charge_realizations"], mc["n_spin_realizations"],
                             gamma=config["sample"]["gamma"],
                             include_hyperfine=mc["include_hyperfine"])


def _out_path(args, stem, suffix) -> Path:
    name = f"{stem}_{args.tag}" if args.tag else stem
    return args.out_dir / f"{name}{suffix}"


def cmd_simulate(args, config):
    sim, sample = config["simulate"], config["sample"]
    rng = np.random.default_rng(config["seed"])
    b = sim["b_applied"]
    center = sim["center"] or NVConstants().d_gs + b
    grid = FrequencyGrid.centered(center, sim["half_width"], sim["step"])
    cfg = replace(_sim_config(config), b_applied=b)
    spec = ensemble_spectrum(sample["rho_c"], sample["rho_s"], cfg, grid, rng=rng)
    if sim["noise"] > 0:
        sigma = sim["noise"] * float(np.ptp(spec.contrast))
        spec = Spectrum(spec.frequency, spec.contrast + rng.normal(0.0, sigma, len(spec)),
                        np.full(len(spec), sigma))
    path = _out_path(args, "simulate", ".csv")
    write_spectrum(path, spec)
    files = {"spectrum": path.name}
    if sim["plot_data"]:
        overlay = fit_double_lorentzian(spec, offset=0.0)
        plot = _out_path(args, "simulate_plot", ".csv")
        write_plot_data(plot, {"spectrum": (spec.frequency, spec.contrast),
                               "double_lorentzian": (spec.frequency, overlay["model"])})
        files["plot_data"] = plot.name
    payload = {"files": files, "n_points": len(spec), "sha256": _sha256(path)}
    return payload


def cmd_fit_ensemble(args, config):
    fe, sample = config["fit_ensemble"], config["sample"]
    high = read_spectrum(args.high, invert=fe["invert"])
    zero = read_spectrum(args.zero, invert=fe["invert"])
    scale = np.linspace(fe["grid_low"], fe["grid_high"], fe["grid_points"])
    cfg = _sim_config(config)
    gamma0 = fe["gamma0"] or sample["gamma"]
    result = fit_ensemble(high, zero, scale * sample["rho_s"], scale * sample["rho_c"], cfg,
                          fe["b_applied"], rng=config["seed"], gamma0=gamma0,
                          joint=fe["joint"])
    return {"inputs": {"high": [args.high, _sha256(args.high)],
                       "zero": [args.zero, _sha256(args.zero)]},
            "result": result.to_dict()}


def cmd_fit_single(args, config):
    fs = config["fit_single"]
    phis = args.phi_mw if args.phi_mw else fs["phi_mw"]
    if len(phis) != len(args.data):
        raise ValidationError(f"{len(args.data)} data file(s) but {len(phis)} drive angle(s)")
    spectra = [read_spectrum(p, invert=fs["invert"]) for p in args.data]
    result = fit_single_nv(spectra, phis, n14=fs["n14"],
                           c13_coupling=fs["c13_coupling"] or None, n_bins=fs["n_bins"],
                           n_samples=fs["n_samples"], rng=config["seed"])
    return {"inputs": [[p, _sha256(p)] for p in args.data], "phi_mw": list(phis),
            "result": result.to_dict()}


def cmd_imbalance(args, config):
    flag = config["imbalance"]["absolute_sigma"]
    absolute = None if flag == "auto" else bool(flag)
    fit = fit_imbalance_curve(read_curve(args.curve), absolute_sigma=absolute)
    return {"inputs": [args.curve, _sha256(args.curve)], "result": fit.to_dict()}


def _chain_inputs(args, loc):
    pi_z, pi_perp, phi_e = loc["pi_z"], loc["pi_perp"], loc["phi_e"]
    errors = list(loc["errors"])
    if args.from_single:
        env = read_envelope(args.from_single)
        if env.command != "fit-single":
            raise ValidationError(f"{args.from_single} is not a fit-single result")
        res = env.payload["result"]
        (pi_z, errors[0]), (pi_perp, errors[1]) = res["pi_z"], res["pi_perp"]
        phi_e, errors[2] = res["phi_e"]
    if args.from_imbalance:
        env = read_envelope(args.from_imbalance)
        if env.command != "imbalance":
            raise ValidationError(f"{args.from_imbalance} is not an imbalance result")
        phi_e, errors[2] = env.payload["result"]["phi_e"], env.payload["result"]["phi_e_err"]
    return pi_z, pi_perp, phi_e, errors


def cmd_localize(args, config):
    loc_cfg = config["localize"]
    pi_z, pi_perp, phi_e, errors = _chain_inputs(args, loc_cfg)
    est = reconstruct_field(pi_z, pi_perp, phi_e, errors=tuple(errors))
    loc = confidence_region(est.e_vector, est.covariance, n_mc=loc_cfg["n_mc"],
                            rng=config["seed"], levels=tuple(loc_cfg["levels"]),
                            sign=loc_cfg["charge_sign"],
                            sign_agnostic_z=loc_cfg["sign_agnostic_z"])
    cloud = _out_path(args, "localize_cloud", ".csv")
    write_cloud(cloud, loc)
    return {"inputs": {"pi_z": pi_z, "pi_perp": pi_perp, "phi_e": phi_e, "errors": errors},
            "result": loc.to_dict(),
            "fractions": [loc.fraction(k) for k in range(len(loc.levels))],
            "files": {"cloud": cloud.name}, "sha256": _sha256(cloud)}


def cmd_mw_angle(args, config):
    m = config["mw_angle"]
    wire = WireGeometry(m["phi_wire"], m["h"], m["r"], m["tilt"], m["h_sigma"], m["tilt_sigma"])
    nv = NVOrientation(m["axis"], m["bond"])
    dist = mw_angle_uncertainty(wire, nv, n_mc=m["n_mc"], rng=config["seed"])
    return {"phi_mw": microwave_polarization(wire, nv), "mean": dist.mean, "std": dist.std}


HANDLERS = {
    "simulate": cmd_simulate,
    "fit-ensemble": cmd_fit_ensemble,
    "fit-single": cmd_fit_single,
    "imbalance": cmd_imbalance,
    "localize": cmd_localize,
    "mw-angle": cmd_mw_angle,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--print-config", action="store_true",
                        help="print the resolved configuration and exit")
    common.add_argument("--seed", type=int, help="RNG seed (overrides the config)")
    common.add_argument("--preset", choices=sorted(PRESETS), help="load sample parameters")
    common.add_argument("--realizations", help="Monte Carlo size, N or NCxNS")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override one config value, e.g. simulate.b_applied=126")
    common.add_argument("--out", help=f"output directory (default ${OUTPUT_ENV} or .)")
    common.add_argument("--tag", help="suffix for output file names")
    common.add_argument("--timing", action="store_true",
                        help="record wall time (outputs then differ between runs)")

    parser = argparse.ArgumentParser(prog="nvcharge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"nvcharge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="synthesize an ensemble spectrum")
    p = sub.add_parser("fit-ensemble", parents=[common], help="fit rho_s, rho_c and Gamma")
    p.add_argument("--high", required=True, help="high-field spectrum CSV")
    p.add_argument("--zero", required=True, help="zero-field spectrum CSV")
    p = sub.add_parser("fit-single", parents=[common], help="fit one NV's static field")
    p.add_argument("--data", nargs="+", required=True, help="spectrum CSV(s)")
    p.add_argument("--phi-mw", nargs="+", type=float, help="drive angle per file (degrees)")
    p = sub.add_parser("imbalance", parents=[common], help="fit phi_E to an imbalance curve")
    p.add_argument("--curve", required=True, help="imbalance curve CSV")
    p = sub.add_parser("localize", parents=[common], help="locate the charge")
    p.add_argument("--from-single", help="fit-single result for pi_z and pi_perp")
    p.add_argument("--from-imbalance", help="imbalance result for phi_E")
    sub.add_parser("mw-angle", parents=[common], help="drive polarization from wire geometry")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        if args.print_config:
            sys.stdout.write(dump_config(config))
            return EXIT_OK
        args.out_dir = Path(args.out or os.environ.get(OUTPUT_ENV) or ".")
        args.out_dir.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            payload = HANDLERS[args.command](args, config)
        if caught:
            payload["warnings"] = sorted({str(w.message) for w in caught})
        timing = {"wall_seconds": time.perf_counter() - start} if args.timing else None
        stem = args.command.replace("-", "_")
        env = ResultEnvelope(args.command, config, payload, seed=config["seed"], timing=timing)
        path = _out_path(args, stem, ".json")
        write_envelope(path, env)
        print(path)
        return EXIT_OK
    except ConvergenceError as exc:
        print(f"nvcharge: did not converge: {exc}", file=sys.stderr)
        return EXIT_CONVERGENCE
    except (NVChargeError, ValueError) as exc:
        print(f"nvcharge: invalid input: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"nvcharge: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
