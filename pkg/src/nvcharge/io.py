"""Versioned CSV/JSON formats and TOML run configuration.

Every file starts with (CSV) or contains (JSON) a ``schema`` tag
``name/major``; readers reject a major version they do not know.
Floats are written with 17 significant digits, so a value read back is
bit-identical and repeated runs give byte-identical files.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import tomlkit

from . import __version__
from .exceptions import ParseError, SchemaVersionError, ValidationError
from .localization import ChargeLocalization, ImbalanceCurve
from .spectra import Spectrum

__all__ = [
    "SPECTRUM_SCHEMA",
    "CURVE_SCHEMA",
    "CLOUD_SCHEMA",
    "PLOT_SCHEMA",
    "RESULT_SCHEMA",
    "ResultEnvelope",
    "write_spectrum",
    "read_spectrum",
    "write_curve",
    "read_curve",
    "write_cloud",
    "write_plot_data",
    "write_envelope",
    "read_envelope",
    "to_jsonable",
    "DEFAULT_CONFIG",
    "PRESETS",
    "load_config",
    "dump_config",
    "merge_config",
]

SPECTRUM_SCHEMA = "nvcharge.spectrum/1"
CURVE_SCHEMA = "nvcharge.imbalance/1"
CLOUD_SCHEMA = "nvcharge.cloud/1"
PLOT_SCHEMA = "nvcharge.plot/1"
RESULT_SCHEMA = "nvcharge.result/1"


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _check_schema(found: str, expected: str, where: str):
    name, _, major = found.partition("/")
    exp_name, _, exp_major = expected.partition("/")
    if name != exp_name:
        raise SchemaVersionError(f"{where}: expected schema {exp_name!r}, found {name!r}")
    if major != exp_major:
        raise SchemaVersionError(
            f"{where}: unsupported {name} schema major version {major!r} (supported: {exp_major})"
        )


def _write_table(path, schema, header, columns):
    buf = io.StringIO()
    buf.write(f"# schema: {schema}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in zip(*columns):
        w.writerow([c if isinstance(c, str) else _fmt(c) for c in row])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _read_table(path, schema, required, optional=()):
    """Rows of floats keyed by column name, with line/column diagnostics."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    body_start = 0
    for i, line in enumerate(lines):
        stripped = line.strip()
        if not stripped:
            continue
        if stripped.startswith("#"):
            key, _, value = stripped.lstrip("#").partition(":")
            if key.strip() == "schema":
                _check_schema(value.strip(), schema, f"{path}:{i + 1}")
            continue
        body_start = i
        break
    else:
        raise ValidationError(f"{path}: file has no header or data rows")
    reader = csv.reader(lines[body_start:])
    header = [h.strip() for h in next(reader)]
    missing = [c for c in required if c not in header]
    if missing:
        raise ParseError(f"{path}:{body_start + 1}: missing column(s) {', '.join(missing)}; "
                         f"found {', '.join(header)}")
    wanted = [c for c in (*required, *optional) if c in header]
    idx = {c: header.index(c) for c in wanted}
    data = {c: [] for c in wanted}
    for k, row in enumerate(reader):
        lineno = body_start + 2 + k
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise ParseError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        for c in wanted:
            cell = row[idx[c]].strip()
            try:
                value = float(cell)
            except ValueError:
                raise ParseError(
                    f"{path}:{lineno}:{idx[c] + 1}: column {c!r}: cannot parse {cell!r} as a number"
                ) from None
            if not math.isfinite(value):
                raise ParseError(f"{path}:{lineno}:{idx[c] + 1}: column {c!r}: non-finite value")
            data[c].append(value)
    if not data[required[0]]:
        raise ValidationError(f"{path}: no data rows")
    return {c: np.array(v) for c, v in data.items()}


def write_spectrum(path, spectrum: Spectrum):
    header = ["frequency_mhz", "contrast"]
    cols = [spectrum.frequency, spectrum.contrast]
    if spectrum.sigma is not None:
        header.append("sigma")
        cols.append(spectrum.sigma)
    _write_table(path, SPECTRUM_SCHEMA, header, cols)


def read_spectrum(path, invert: bool = False) -> Spectrum:
    """Read a spectrum CSV. ``invert`` maps raw fluorescence ``F`` to contrast ``1 - F``."""
    t = _read_table(path, SPECTRUM_SCHEMA, ("frequency_mhz", "contrast"), ("sigma",))
    contrast = 1.0 - t["contrast"] if invert else t["contrast"]
    order = np.argsort(t["frequency_mhz"], kind="stable")
    sigma = t.get("sigma")
    return Spectrum(t["frequency_mhz"][order], contrast[order],
                    None if sigma is None else sigma[order])


def write_curve(path, curve: ImbalanceCurve):
    header = ["phi_mw_deg", "imbalance"]
    cols = [curve.phi_mw, curve.imbalance]
    if curve.uncertainty is not None:
        header.append("sigma")
        cols.append(curve.uncertainty)
    _write_table(path, CURVE_SCHEMA, header, cols)


def read_curve(path) -> ImbalanceCurve:
    t = _read_table(path, CURVE_SCHEMA, ("phi_mw_deg", "imbalance"), ("sigma",))
    return ImbalanceCurve(t["phi_mw_deg"], t["imbalance"], t.get("sigma"))


def write_cloud(path, loc: ChargeLocalization):
    """Sampled charge positions (nm) with the confidence level that first contains each."""
    names = [f"{p:g}" for p in loc.levels]
    level = [names[k] if k >= 0 else "outside" for k in loc.labels]
    _write_table(path, CLOUD_SCHEMA, ["x_nm", "y_nm", "z_nm", "level"],
                 [loc.cloud[:, 0], loc.cloud[:, 1], loc.cloud[:, 2], level])


def write_plot_data(path, series: dict):
    """Tidy ``series,x,y`` table; ``series`` maps a name to ``(x, y)`` arrays."""
    names, xs, ys = [], [], []
    for name, (x, y) in series.items():
        names += [name] * len(x)
        xs.append(np.asarray(x, dtype=float))
        ys.append(np.asarray(y, dtype=float))
    _write_table(path, PLOT_SCHEMA, ["series", "x", "y"],
                 [names, np.concatenate(xs), np.concatenate(ys)])


def to_jsonable(obj):
    """Plain JSON types; floats survive a round trip exactly."""
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    if hasattr(obj, "to_dict"):
        return to_jsonable(obj.to_dict())
    if obj is None or isinstance(obj, str):
        return obj
    raise TypeError(f"cannot serialize {type(obj).__name__}")


@dataclass
class ResultEnvelope:
    """A result plus everything needed to reproduce it.

    ``timing`` is only filled when asked for, since wall-clock values
    would break byte-identical reruns.
    """

    command: str
    config: dict
    payload: dict
    seed: int | None = None
    version: str = __version__
    schema: str = RESULT_SCHEMA
    timing: dict | None = None

    def to_dict(self) -> dict:
        out = {
            "schema": self.schema,
            "version": self.version,
            "command": self.command,
            "seed": self.seed,
            "config": self.config,
            "payload": self.payload,
        }
        if self.timing is not None:
            out["timing"] = self.timing
        return to_jsonable(out)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def write_envelope(path, envelope: ResultEnvelope):
    Path(path).write_text(envelope.to_json(), encoding="utf-8")


def read_envelope(path) -> ResultEnvelope:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict) or "schema" not in raw:
        raise ParseError(f"{path}: not a result envelope (no schema field)")
    _check_schema(raw["schema"], RESULT_SCHEMA, str(path))
    for key in ("command", "config", "payload"):
        if key not in raw:
            raise ParseError(f"{path}: envelope lacks {key!r}")
    return ResultEnvelope(raw["command"], raw["config"], raw["payload"], raw.get("seed"),
                          raw.get("version", ""), raw["schema"], raw.get("timing"))


# Sample parameters (rho_c ppm, rho_s ppm, Gamma MHz)
PRESETS = {
    "S1": {"rho_c": 1.35, "rho_s": 70.0, "gamma": 1.16},
    "S2": {"rho_c": 1.7, "rho_s": 100.0, "gamma": 0.78},
    "S3": {"rho_c": 0.06, "rho_s": 12.0, "gamma": 0.26},
    "S4": {"rho_c": 3.6, "rho_s": 90.0, "gamma": 1.0},
    "S5": {"rho_c": 0.9, "rho_s": 130.0, "gamma": 3.3},
    "S6": {"rho_c": 0.05, "rho_s": 16.0, "gamma": 0.08},
}

DEFAULT_CONFIG = {
    "seed": 0,
    "sample": {"rho_c": 1.35, "rho_s": 70.0, "gamma": 1.16},
    "monte_carlo": {
        "n_charge_realizations": 5000,
        "n_spin_realizations": 50,
        "include_hyperfine": "n14_three_lines",
    },
    "simulate": {
        "b_applied": 0.0,
        "center": 0.0,
        "half_width": 12.0,
        "step": 0.05,
        "noise": 0.0,
        "plot_data": False,
    },
    "fit_ensemble": {
        "b_applied": 126.0,
        "grid_low": 0.5,
        "grid_high": 1.5,
        "grid_points": 21,
        "gamma0": 0.0,
        "joint": True,
        "invert": False,
    },
    "fit_single": {
        "phi_mw": [0.0],
        "n14": True,
        "c13_coupling": 0.0,
        "n_bins": 15,
        "n_samples": 20000,
        "invert": False,
    },
    "imbalance": {"absolute_sigma": "auto"},
    "localize": {
        "pi_z": 0.03,
        "pi_perp": 0.65,
        "phi_e": 124.0,
        "errors": [0.0, 0.0, 0.0],
        "charge_sign": 1,
        "n_mc": 10000,
        "levels": [0.68, 0.95],
        "sign_agnostic_z": False,
    },
    "mw_angle": {
        "phi_wire": 0.0,
        "h": 550.0,
        "r": 0.0,
        "tilt": 0.0,
        "h_sigma": 100.0,
        "tilt_sigma": 10.0,
        "axis": 0,
        "bond": 0,
        "n_mc": 1000,
    },
}

_CONFIG_DOC = """\
nvcharge run configuration.

seed            integer RNG seed, recorded in every output
[sample]        rho_c, rho_s (ppm) and gamma (MHz FWHM) of the simulated sample
[monte_carlo]   realization counts and hyperfine mode ("n14_three_lines" or "none")
[simulate]      b_applied and center (MHz, 0 centers on D_gs + b_applied), grid
                half_width and step (MHz), noise as a fraction of dip depth,
                plot_data to also write a tidy overlay table
[fit_ensemble]  b_applied of the high-field data (MHz), density grids spanning
                grid_low..grid_high times the sample values, gamma0 (0 uses
                [sample] gamma), joint refinement, invert raw fluorescence
[fit_single]    phi_mw per data file (degrees), hyperfine options (c13_coupling 0
                disables 13C), bath discretization, invert raw fluorescence
[imbalance]     absolute_sigma: "auto", true or false
[localize]      pi_z, pi_perp (MHz), phi_e (degrees), their 1-sigma errors,
                charge_sign, Monte Carlo size, confidence levels
[mw_angle]      wire angle (deg), height and offset (um), tilt (deg), their
                uncertainties, NV axis 0-3 and bond 0-2, Monte Carlo size
"""


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Deep merge that rejects unknown keys and mistyped values."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise ValidationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ValidationError(f"config key {where!r} must be a table")
            out[key] = merge_config(base[key], value, where + ".")
        else:
            out[key] = _coerce(base[key], value, where)
    return out


def _coerce(template, value, where):
    if isinstance(template, bool):
        if not isinstance(value, bool):
            raise ValidationError(f"config key {where!r} must be true or false")
        return value
    if isinstance(template, int) and not isinstance(value, bool) and isinstance(value, int):
        return int(value)
    if isinstance(template, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(template, str) and isinstance(value, (str, bool)):
        return value
    if isinstance(template, list) and isinstance(value, list):
        return [float(v) if isinstance(v, (int, float)) else v for v in value]
    raise ValidationError(f"config key {where!r} has the wrong type ({type(value).__name__})")


def load_config(path) -> dict:
    """Read a TOML config and merge it over the defaults."""
    try:
        doc = tomlkit.parse(Path(path).read_text(encoding="utf-8"))
    except tomlkit.exceptions.ParseError as exc:
        raise ParseError(f"{path}:{exc.line}:{exc.col}: {exc}") from None
    return merge_config(DEFAULT_CONFIG, doc.unwrap())


def dump_config(config: dict) -> str:
    doc = tomlkit.document()
    for line in _CONFIG_DOC.splitlines():
        doc.add(tomlkit.comment(line) if line else tomlkit.nl())
    doc.add(tomlkit.nl())
    for key, value in config.items():
        if not isinstance(value, dict):
            doc.add(key, value)
    for key, value in config.items():
        if isinstance(value, dict):
            table = tomlkit.table()
            for k, v in value.items():
                table.add(k, v)
            doc.add(key, table)
    return tomlkit.dumps(doc)
