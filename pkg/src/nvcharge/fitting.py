"""Residual-scan fitting of ensemble spectra and least-squares single-NV fits.

Ensemble densities are never optimized by gradient: a spectrum is
simulated for every value on a density grid (with one shared set of Monte
Carlo draws), the nuisance parameters are optimized at each point, and the
best value is reported with the range of grid values whose residual stays
within 10 % of the minimum.

Amplitude and offset are always eliminated in closed form
(:func:`nuisance_optimize`), so scaling the data never moves a fitted
physical parameter.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import curve_fit, minimize, minimize_scalar
from scipy.signal import find_peaks

from .bath import BathEnsemble, PhysicalConstants, as_generator, pi_from_field, sample_delta_bz
from .exceptions import (
    ConvergenceError,
    DegenerateDataError,
    SingularDesignError,
    ValidationError,
)
from .spectra import (
    EnsembleSimConfig,
    FrequencyGrid,
    Spectrum,
    _convolve_values,
    discretize_samples,
    lorentzian_sum,
    resonance_histogram,
    single_nv_lines,
)
from .spin import NVConstants

__all__ = [
    "RESIDUAL_TOLERANCE",
    "FitResult",
    "ResidualScan",
    "EnsembleFitResult",
    "SingleNVResult",
    "nuisance_optimize",
    "error_from_interval",
    "fit_high_field",
    "fit_zero_field",
    "fit_ensemble",
    "fit_single_nv",
    "fit_double_lorentzian",
    "tail_excess",
    "SINGLE_NV_CONSTANTS",
]

RESIDUAL_TOLERANCE = 0.10
# ensemble-averaged zero-field splitting used as the Pi_z reference for single NVs
SINGLE_NV_CONSTANTS = NVConstants(d_gs=2870.25)


@dataclass
class FitResult:
    """Best value of one parameter with an (asymmetric) error interval."""

    name: str
    value: float
    lower: float
    upper: float
    residual: float
    nuisances: dict = field(default_factory=dict)
    at_edge: bool = False

    def __post_init__(self):
        if not (self.lower <= self.value <= self.upper):
            raise ValidationError(
                f"{self.name}: interval [{self.lower}, {self.upper}] excludes {self.value}"
            )
        if self.residual < 0:
            raise ValidationError("residual must be non-negative")

    @property
    def errors(self) -> tuple[float, float]:
        return self.value - self.lower, self.upper - self.value

    def contains(self, x: float) -> bool:
        return self.lower <= x <= self.upper

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "lower": self.lower,
            "upper": self.upper,
            "residual": self.residual,
            "nuisances": dict(self.nuisances),
            "at_edge": self.at_edge,
        }


@dataclass
class ResidualScan:
    values: np.ndarray
    residuals: np.ndarray
    nuisances: list = field(default_factory=list)
    tolerance: float = RESIDUAL_TOLERANCE

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.residuals = np.asarray(self.residuals, dtype=float)
        if self.values.size == 0 or self.values.shape != self.residuals.shape:
            raise ValidationError("scan needs matching, nonempty value and residual arrays")

    @property
    def best_index(self) -> int:
        return int(np.argmin(self.residuals))

    @property
    def best_value(self) -> float:
        return float(self.values[self.best_index])

    @property
    def min_residual(self) -> float:
        return float(self.residuals[self.best_index])

    @property
    def threshold(self) -> float:
        return (1.0 + self.tolerance) * self.min_residual

    @property
    def at_edge(self) -> bool:
        """True when the minimum is not interior to the grid."""
        order = np.argsort(self.values)
        return self.best_index in (order[0], order[-1])

    @property
    def interval(self) -> tuple[float, float]:
        return error_from_interval(self)

    def to_dict(self) -> dict:
        lo, hi = self.interval
        return {
            "values": self.values.tolist(),
            "residuals": self.residuals.tolist(),
            "threshold": self.threshold,
            "interval": [lo, hi],
            "at_edge": self.at_edge,
        }


def error_from_interval(scan: ResidualScan) -> tuple[float, float]:
    """Extreme grid values whose residual is within the tolerance of the minimum."""
    # relative slack so grid points sitting exactly on the threshold count
    ok = scan.residuals <= scan.threshold * (1 + 1e-12)
    inside = scan.values[ok]
    return float(inside.min()), float(inside.max())


def nuisance_optimize(model, data, sigma=None) -> tuple[float, float, float]:
    """Closed-form amplitude ``a`` and offset ``b`` minimizing ``sum w (d - a m - b)^2``.

    Returns ``(a, b, residual)``; weights are ``1/sigma^2`` when given.
    """
    m = np.asarray(model, dtype=float)
    d = np.asarray(data, dtype=float)
    if m.shape != d.shape:
        raise ValidationError("model and data must be on the same grid")
    w = np.ones_like(d) if sigma is None else 1.0 / np.asarray(sigma, dtype=float) ** 2
    sw = w.sum()
    m_mean = (w * m).sum() / sw
    d_mean = (w * d).sum() / sw
    dm = m - m_mean
    sxx = (w * dm * dm).sum()
    if not sxx > 1e-24 * max(1.0, (w * m * m).sum()):
        raise SingularDesignError("model curve is constant; amplitude is undetermined")
    a = (w * dm * (d - d_mean)).sum() / sxx
    b = d_mean - a * m_mean
    r = d - a * m - b
    return float(a), float(b), float((w * r * r).sum())


def _check_data(data: Spectrum, min_points: int = 10):
    if len(data) < min_points:
        raise ValidationError(f"need at least {min_points} data points, got {len(data)}")
    if np.ptp(data.contrast) == 0:
        raise DegenerateDataError("flat spectrum carries no line-shape information")


class _ShiftProfile:
    """Model line shape on a padded uniform grid, fitted to data with a free shift."""

    def __init__(self, data: Spectrum, step: float, max_shift: float, pad: float):
        self.data = data
        f = data.frequency
        if data.is_uniform:
            base = data.grid.step
            step = base / max(1, int(np.ceil(base / step - 1e-9)))
        self.step = step
        n_lo = int(np.ceil((max_shift + pad) / step))
        n_hi = int(np.ceil((f[-1] - f[0] + max_shift + pad) / step))
        self.grid = FrequencyGrid(f[0] - n_lo * step, f[0] + n_hi * step, n_lo + n_hi + 1)
        self.values = self.grid.values
        self.max_shift = max_shift
        sigma = data.sigma
        self._w = np.ones(len(data)) if sigma is None else 1.0 / np.asarray(sigma) ** 2

    def _models(self, shape, shifts):
        """Linear interpolation of ``shape`` at ``f - shift``, one row per shift."""
        pos = (self.data.frequency[None, :] - np.asarray(shifts)[:, None] - self.values[0]) / self.step
        i = np.clip(np.floor(pos).astype(int), 0, self.values.size - 2)
        t = np.clip(pos - i, 0.0, 1.0)
        return (1 - t) * shape[i] + t * shape[i + 1]

    def _batch(self, shape, shifts):
        """Closed-form amplitude, offset and residual for every shift at once."""
        m = self._models(shape, shifts)
        d = self.data.contrast
        w = self._w
        sw = w.sum()
        m_mean = (m * w).sum(axis=1) / sw
        d_mean = (w * d).sum() / sw
        dm = m - m_mean[:, None]
        sxx = (w * dm * dm).sum(axis=1)
        ok = sxx > 1e-24 * np.maximum(1.0, (w * m * m).sum(axis=1))
        a = np.where(ok, (w * dm * (d - d_mean)).sum(axis=1) / np.where(ok, sxx, 1.0), 0.0)
        b = d_mean - a * m_mean
        r = d[None, :] - a[:, None] * m - b[:, None]
        res = np.where(ok, (w * r * r).sum(axis=1), np.inf)
        return a, b, res

    def fit(self, shape) -> dict:
        """Best shift plus closed-form amplitude and offset for one line shape."""
        if self.max_shift == 0:
            a, b, r = self._batch(shape, [0.0])
            return {"shift": 0.0, "amplitude": float(a[0]), "offset": float(b[0]),
                    "residual": float(r[0])}
        shifts = np.arange(-self.max_shift, self.max_shift + 0.5 * self.step, self.step)
        stride = max(1, shifts.size // 24)
        if stride > 1:
            # coarse pass, then full resolution around its minimum
            coarse = np.arange(0, shifts.size, stride)
            k0 = coarse[int(np.argmin(self._batch(shape, shifts[coarse])[2]))]
            shifts = shifts[max(k0 - stride, 0):k0 + stride + 1]
        a, b, res = self._batch(shape, shifts)
        k = int(np.argmin(res))
        # parabolic refinement between neighbouring grid shifts
        shift = float(shifts[k])
        if 0 < k < shifts.size - 1 and np.all(np.isfinite(res[k - 1:k + 2])):
            r0, r1, r2 = res[k - 1:k + 2]
            denom = r0 - 2 * r1 + r2
            if denom > 0:
                shift += 0.5 * self.step * (r0 - r2) / denom
        a1, b1, r1 = self._batch(shape, [shift])
        if not r1[0] <= res[k]:
            shift, a1, b1, r1 = float(shifts[k]), a[k:k + 1], b[k:k + 1], res[k:k + 1]
        return {"shift": shift, "amplitude": float(a1[0]), "offset": float(b1[0]),
                "residual": float(r1[0])}


def _grid_array(grid, name):
    grid = np.asarray(grid, dtype=float).ravel()
    if grid.size == 0:
        raise ValidationError(f"{name} grid is empty")
    if np.any(grid < 0):
        raise ValidationError(f"{name} grid must be non-negative")
    return grid


def _edge_warning(name, scan):
    if scan.at_edge and scan.values.size > 1:
        warnings.warn(
            f"best {name} = {scan.best_value:g} lies on the edge of the scan grid; "
            "the true minimum may lie outside it",
            stacklevel=3,
        )


def fit_high_field(data: Spectrum, rho_s_grid, cfg: EnsembleSimConfig, rng=None, *,
                   rho_c: float = 0.0, max_shift: float = 2.0,
                   bath: BathEnsemble | None = None) -> tuple[FitResult, ResidualScan]:
    """Spin-bath density from a spectrum taken at high axial field.

    For every ``rho_s`` the simulated spectrum is fitted over centre
    frequency, amplitude and offset; ``cfg.gamma`` and ``cfg.b_applied``
    are held fixed.
    """
    _check_data(data)
    grid = _grid_array(rho_s_grid, "rho_s")
    if bath is None:
        bath = cfg.draw_bath(rng)
    step = cfg.gamma / 3 if cfg.gamma > 0 else np.min(np.diff(data.frequency))
    profile = _ShiftProfile(data, step, max_shift, pad=max(5 * cfg.gamma, 2.0))
    pi = pi_from_field(bath.fields(rho_c), cfg.nv)
    fits = []
    for rho_s in grid:
        density = resonance_histogram(
            pi, bath.offsets(rho_s), profile.grid, cfg.b_applied, cfg.m_values, cfg.nv
        )
        fits.append(profile.fit(_convolve_values(density, profile.step, cfg.gamma)))
    scan = ResidualScan(grid, [f["residual"] for f in fits], fits)
    best = fits[scan.best_index]
    if not np.isfinite(best["residual"]) or best["amplitude"] <= 0:
        raise ConvergenceError(
            "no grid point produced a positive-amplitude fit", diagnostics=best
        )
    _edge_warning("rho_s", scan)
    lo, hi = scan.interval
    result = FitResult(
        "rho_s", scan.best_value, lo, hi, scan.min_residual,
        {k: best[k] for k in ("shift", "amplitude", "offset")}, scan.at_edge,
    )
    return result, scan


def _fit_gamma(profile: _ShiftProfile, density, bounds):
    lo, hi = np.log(bounds[0]), np.log(bounds[1])

    def cost(log_g):
        return profile.fit(_convolve_values(density, profile.step, np.exp(log_g)))["residual"]

    coarse = np.linspace(lo, hi, 9)
    res = [cost(x) for x in coarse]
    k = int(np.argmin(res))
    a, b = coarse[max(k - 1, 0)], coarse[min(k + 1, len(coarse) - 1)]
    opt = minimize_scalar(cost, bounds=(a, b), method="bounded", options={"xatol": 1e-4})
    log_g = float(opt.x) if opt.fun <= res[k] else float(coarse[k])
    gamma = float(np.exp(log_g))
    fit = profile.fit(_convolve_values(density, profile.step, gamma))
    fit["gamma"] = gamma
    return fit


def _gamma_standard_error(profile, density, gamma, n_free):
    h = 0.05 * gamma
    r = [
        profile.fit(_convolve_values(density, profile.step, g))["residual"]
        for g in (gamma - h, gamma, gamma + h)
    ]
    curvature = (r[0] - 2 * r[1] + r[2]) / h**2
    dof = max(len(profile.data) - n_free, 1)
    if not curvature > 0:
        return float("nan")
    return float(np.sqrt(2.0 * (r[1] / dof) / curvature))


def fit_zero_field(data: Spectrum, rho_s_fixed: float, rho_c_grid, cfg: EnsembleSimConfig,
                   rng=None, *, gamma_bounds: tuple[float, float] | None = None,
                   max_shift: float = 1.0, bath: BathEnsemble | None = None
                   ) -> tuple[FitResult, FitResult, ResidualScan]:
    """Charge density and natural linewidth from a zero-field spectrum.

    The spin-bath density is held at ``rho_s_fixed``. At every ``rho_c``
    the linewidth, centre, amplitude and offset are optimized. The linewidth
    error is the curvature standard error at the best ``rho_c``.

    Returns ``(rho_c_result, gamma_result, scan)``.
    """
    _check_data(data)
    grid = _grid_array(rho_c_grid, "rho_c")
    if rho_s_fixed < 0:
        raise ValidationError("rho_s_fixed must be non-negative")
    if bath is None:
        bath = cfg.draw_bath(rng)
    if gamma_bounds is None:
        gamma_bounds = _default_gamma_bounds(data)
    if not 0 < gamma_bounds[0] < gamma_bounds[1]:
        raise ValidationError("gamma_bounds must satisfy 0 < low < high")
    profile = _ShiftProfile(data, gamma_bounds[0] / 2.5, max_shift,
                            pad=max(5 * gamma_bounds[0], 2.0))
    dbz = bath.offsets(rho_s_fixed)
    fits, densities = [], []
    for rho_c in grid:
        pi = pi_from_field(bath.fields(rho_c), cfg.nv)
        density = resonance_histogram(pi, dbz, profile.grid, cfg.b_applied, cfg.m_values, cfg.nv)
        densities.append(density)
        fits.append(_fit_gamma(profile, density, gamma_bounds))
    scan = ResidualScan(grid, [f["residual"] for f in fits], fits)
    best = fits[scan.best_index]
    if not np.isfinite(best["residual"]) or best["amplitude"] <= 0:
        raise ConvergenceError("zero-field fit found no positive-amplitude solution",
                               diagnostics=best)
    _edge_warning("rho_c", scan)
    lo, hi = scan.interval
    nuis = {k: best[k] for k in ("shift", "amplitude", "offset")}
    rho_c_result = FitResult("rho_c", scan.best_value, lo, hi, scan.min_residual,
                             nuis, scan.at_edge)
    gamma = best["gamma"]
    se = _gamma_standard_error(profile, densities[scan.best_index], gamma, n_free=5)
    if not np.isfinite(se):
        warnings.warn("linewidth curvature is not positive; no standard error", stacklevel=2)
        se_lo = se_hi = 0.0
    else:
        se_lo = se_hi = se
    gamma_result = FitResult("gamma", gamma, gamma - se_lo, gamma + se_hi,
                             scan.min_residual, nuis)
    return rho_c_result, gamma_result, scan


@dataclass
class EnsembleFitResult:
    rho_s: FitResult
    rho_c: FitResult
    gamma: FitResult
    high_field_scan: ResidualScan
    zero_field_scan: ResidualScan
    # shift, amplitude and offset of the final model, keyed "high" and "zero"
    nuisances: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "rho_s": self.rho_s.to_dict(),
            "rho_c": self.rho_c.to_dict(),
            "gamma": self.gamma.to_dict(),
            "nuisances": self.nuisances,
            "high_field_scan": self.high_field_scan.to_dict(),
            "zero_field_scan": self.zero_field_scan.to_dict(),
        }


class _JointCost:
    """Summed residual of the high- and zero-field spectra with one shared linewidth."""

    def __init__(self, high, zero, cfg, b_applied, bath, gamma_bounds, max_shift_high,
                 max_shift_zero):
        self.cfg = cfg
        self.b_applied = b_applied
        self.bath = bath
        step = gamma_bounds[0] / 2.5
        self.high = _ShiftProfile(high, step, max_shift_high, pad=max(5 * gamma_bounds[1], 2.0))
        self.zero = _ShiftProfile(zero, step, max_shift_zero, pad=max(5 * gamma_bounds[0], 2.0))
        self.gamma_bounds = gamma_bounds

    def densities(self, rho_s, rho_c):
        pi = pi_from_field(self.bath.fields(rho_c), self.cfg.nv)
        dbz = self.bath.offsets(rho_s)
        m = self.cfg.m_values
        dh = resonance_histogram(pi, dbz, self.high.grid, self.b_applied, m, self.cfg.nv)
        dz = resonance_histogram(pi, dbz, self.zero.grid, 0.0, m, self.cfg.nv)
        return dh, dz

    def fits(self, densities, gamma):
        dh, dz = densities
        fh = self.high.fit(_convolve_values(dh, self.high.step, gamma))
        fz = self.zero.fit(_convolve_values(dz, self.zero.step, gamma))
        return fh, fz

    def total(self, densities, gamma) -> float:
        fh, fz = self.fits(densities, gamma)
        if fh["amplitude"] <= 0 or fz["amplitude"] <= 0:
            return np.inf
        return fh["residual"] + fz["residual"]

    def profile_gamma(self, densities, gamma_start):
        """Best linewidth near ``gamma_start`` for fixed densities."""
        lo = max(np.log(self.gamma_bounds[0]), np.log(gamma_start) - np.log(2.0))
        hi = min(np.log(self.gamma_bounds[1]), np.log(gamma_start) + np.log(2.0))
        opt = minimize_scalar(lambda x: self.total(densities, np.exp(x)), bounds=(lo, hi),
                              method="bounded", options={"xatol": 1e-3})
        return float(np.exp(opt.x)), float(opt.fun)

    def scan(self, name, grid, rho_s, rho_c, gamma):
        residuals, nuisances = [], []
        for v in grid:
            dens = self.densities(v, rho_c) if name == "rho_s" else self.densities(rho_s, v)
            g, r = self.profile_gamma(dens, gamma)
            residuals.append(r)
            nuisances.append({"gamma": g})
        return ResidualScan(grid, residuals, nuisances)


def _scan_result(name, scan, value, residual, nuisances):
    """Result at the continuous optimum with the grid interval around it."""
    threshold = min(residual, scan.min_residual) * (1 + RESIDUAL_TOLERANCE)
    inside = scan.values[scan.residuals <= threshold * (1 + 1e-12)]
    lo = min(float(inside.min()), value) if inside.size else value
    hi = max(float(inside.max()), value) if inside.size else value
    return FitResult(name, value, lo, hi, residual, nuisances, scan.at_edge)


def _default_gamma_bounds(data: Spectrum):
    span = data.frequency[-1] - data.frequency[0]
    data_step = float(np.min(np.diff(data.frequency)))
    return (max(0.02, data_step), span / 2)


def fit_ensemble(high_field: Spectrum, zero_field: Spectrum, rho_s_grid, rho_c_grid,
                 cfg: EnsembleSimConfig, b_applied: float, rng=None, *,
                 gamma0: float | None = None, joint: bool = True,
                 gamma_bounds=None, max_shift_high: float = 2.0,
                 max_shift_zero: float = 1.0,
                 bath: BathEnsemble | None = None) -> EnsembleFitResult:
    """Two-step ensemble fit: ``rho_s`` at high field, then ``rho_c`` and Gamma.

    The high-field step uses the linewidth ``gamma0`` (default
    ``cfg.gamma``). At high field the spin-bath broadening and the
    linewidth are nearly interchangeable, so with ``joint`` the two-step
    result only seeds a final least-squares refinement of all three
    parameters against both spectra together. Each density interval is
    then the set of grid values whose summed residual, with the linewidth
    re-optimized, stays within the tolerance of the minimum. One set of
    Monte Carlo draws serves every step.
    """
    if bath is None:
        bath = cfg.draw_bath(rng)
    if gamma_bounds is None:
        gamma_bounds = _default_gamma_bounds(zero_field)
    gamma = cfg.gamma if gamma0 is None else gamma0
    hf_cfg = replace(cfg, gamma=gamma, b_applied=b_applied)
    rho_s, hf_scan = fit_high_field(high_field, rho_s_grid, hf_cfg, bath=bath,
                                    max_shift=max_shift_high)
    zf_cfg = replace(cfg, b_applied=0.0)
    rho_c, gamma_fit, zf_scan = fit_zero_field(
        zero_field, rho_s.value, rho_c_grid, zf_cfg, bath=bath,
        gamma_bounds=gamma_bounds, max_shift=max_shift_zero,
    )
    s_grid = _grid_array(rho_s_grid, "rho_s")
    c_grid = _grid_array(rho_c_grid, "rho_c")
    if not joint or s_grid.max() <= 0 or c_grid.max() <= 0:
        return EnsembleFitResult(rho_s, rho_c, gamma_fit, hf_scan, zf_scan,
                                 {"high": dict(rho_s.nuisances), "zero": dict(rho_c.nuisances)})

    cost = _JointCost(high_field, zero_field, cfg, b_applied, bath, gamma_bounds,
                      max_shift_high, max_shift_zero)

    def bounds_of(grid):
        pos = grid[grid > 0]
        return (np.log(pos.min()), np.log(pos.max()))

    bounds = [bounds_of(s_grid), bounds_of(c_grid), tuple(np.log(gamma_bounds))]
    x0 = np.clip(np.log([max(rho_s.value, 1e-300), max(rho_c.value, 1e-300), gamma_fit.value]),
                 [b[0] for b in bounds], [b[1] for b in bounds])

    def objective(x):
        return cost.total(cost.densities(np.exp(x[0]), np.exp(x[1])), np.exp(x[2]))

    f0 = objective(x0)
    opt = minimize(objective, x0, method="Nelder-Mead", bounds=bounds,
                   options={"xatol": 5e-3, "fatol": 1e-5 * f0,
                            "initial_simplex": _simplex(x0, bounds)})
    if not opt.fun <= f0:
        opt.x, opt.fun = x0, f0
    s_val, c_val, g_val = (float(v) for v in np.exp(opt.x))
    s_scan = cost.scan("rho_s", s_grid, s_val, c_val, g_val)
    c_scan = cost.scan("rho_c", c_grid, s_val, c_val, g_val)
    best_fits = cost.fits(cost.densities(s_val, c_val), g_val)
    nuis = {tag: {k: float(fit[k]) for k in ("shift", "amplitude", "offset")}
            for tag, fit in zip(("high", "zero"), best_fits)}
    rho_s_res = _scan_result("rho_s", s_scan, s_val, float(opt.fun), nuis)
    rho_c_res = _scan_result("rho_c", c_scan, c_val, float(opt.fun), nuis)
    for name, scan in (("rho_s", s_scan), ("rho_c", c_scan)):
        _edge_warning(name, scan)
    se = _joint_gamma_error(cost, s_val, c_val, g_val, n_points=len(high_field) + len(zero_field))
    if not np.isfinite(se):
        warnings.warn("linewidth curvature is not positive; no standard error", stacklevel=2)
        se = 0.0
    gamma_res = FitResult("gamma", g_val, g_val - se, g_val + se, float(opt.fun), nuis)
    return EnsembleFitResult(rho_s_res, rho_c_res, gamma_res, s_scan, c_scan, nuis)


def _simplex(x0, bounds, frac=0.05):
    pts = [x0]
    for i, (lo, hi) in enumerate(bounds):
        p = x0.copy()
        step = frac * max(hi - lo, 0.1)
        p[i] = x0[i] + step if x0[i] + step <= hi else x0[i] - step
        pts.append(p)
    return np.array(pts)


def _joint_gamma_error(cost, rho_s, rho_c, gamma, n_points, n_free=9):
    dens = cost.densities(rho_s, rho_c)
    h = 0.05 * gamma
    r = [cost.total(dens, g) for g in (gamma - h, gamma, gamma + h)]
    curvature = (r[0] - 2 * r[1] + r[2]) / h**2
    if not curvature > 0:
        return float("nan")
    return float(np.sqrt(2.0 * (r[1] / max(n_points - n_free, 1)) / curvature))


@dataclass
class SingleNVResult:
    """Seven-parameter single-NV fit (per-spectrum amplitude and offset)."""

    e_x: FitResult
    e_y: FitResult
    e_z: FitResult
    rho_s: FitResult
    gamma: FitResult
    pi_perp: tuple[float, float]
    pi_z: tuple[float, float]
    phi_e: tuple[float, float]
    amplitudes: list
    offsets: list
    covariance: np.ndarray
    residual: float
    n_evaluations: int = 0

    @property
    def e_vector(self) -> np.ndarray:
        return np.array([self.e_x.value, self.e_y.value, self.e_z.value])

    @property
    def e_errors(self) -> np.ndarray:
        return np.array([0.5 * (p.upper - p.lower) for p in (self.e_x, self.e_y, self.e_z)])

    def to_dict(self) -> dict:
        return {
            "e_x": self.e_x.to_dict(),
            "e_y": self.e_y.to_dict(),
            "e_z": self.e_z.to_dict(),
            "rho_s": self.rho_s.to_dict(),
            "gamma": self.gamma.to_dict(),
            "pi_perp": list(self.pi_perp),
            "pi_z": list(self.pi_z),
            "phi_e": list(self.phi_e),
            "amplitudes": list(self.amplitudes),
            "offsets": list(self.offsets),
            "residual": self.residual,
        }


class _SingleNVModel:
    """Forward model over one or more spectra taken at known drive angles."""

    def __init__(self, spectra, phi_mws, n14, c13_coupling, consts, unit_bins):
        self.spectra = spectra
        self.phi_mws = phi_mws
        self.n14 = n14
        self.c13 = c13_coupling
        self.consts = consts
        self.unit_bins = unit_bins

    def shapes(self, theta):
        pi_x, pi_y, pi_z, log_rho, log_gamma = theta
        rho_s, gamma = np.exp(log_rho), np.exp(log_gamma)
        bins = [(v * rho_s, p) for v, p in self.unit_bins]
        out = []
        for spec, phi in zip(self.spectra, self.phi_mws):
            f, w = single_nv_lines((pi_x, pi_y, pi_z), phi, bins, self.n14, self.c13,
                                   consts=self.consts)
            out.append(lorentzian_sum(f, w, spec.frequency, gamma))
        return out

    def projected(self, theta):
        """Weighted residual vector after eliminating amplitude/offset per spectrum."""
        parts, nuis = [], []
        for spec, m in zip(self.spectra, self.shapes(theta)):
            a, b, _ = nuisance_optimize(m, spec.contrast, spec.sigma)
            r = spec.contrast - a * m - b
            if spec.sigma is not None:
                r = r / spec.sigma
            parts.append(r)
            nuis.append((a, b))
        return np.concatenate(parts), nuis

    def cost(self, theta):
        try:
            r, _ = self.projected(theta)
        except SingularDesignError:
            return np.inf
        return float(r @ r)


def _coarse_start(model: _SingleNVModel, span, log_rho, log_gamma, pi_z_range):
    perp_grid = np.linspace(0.0, max(span / 2 - 0.5, 0.5), 41)
    z_grid = np.linspace(-pi_z_range, pi_z_range, 9)
    # line positions do not depend on the azimuth, so locate (Pi_perp, Pi_z)
    # first with the azimuth fixed, then scan the azimuth
    best = (np.inf, 0.0, 0.0)
    for p in perp_grid:
        for z in z_grid:
            c = model.cost((p, 0.0, z, log_rho, log_gamma))
            c45 = model.cost((p * np.cos(np.pi / 4), p * np.sin(np.pi / 4), z, log_rho, log_gamma))
            c = min(c, c45)
            if c < best[0]:
                best = (c, p, z)
    _, p, z = best
    phis = np.deg2rad(np.arange(0.0, 360.0, 15.0))
    costs = [model.cost((p * np.cos(a), p * np.sin(a), z, log_rho, log_gamma)) for a in phis]
    a = phis[int(np.argmin(costs))]
    return np.array([p * np.cos(a), p * np.sin(a), z, log_rho, log_gamma])


def _jacobian(fun, theta, steps):
    r0 = fun(theta)
    cols = []
    for j, h in enumerate(steps):
        tp, tm = theta.copy(), theta.copy()
        tp[j] += h
        tm[j] -= h
        cols.append((fun(tp) - fun(tm)) / (2 * h))
    return r0, np.stack(cols, axis=1)


def fit_single_nv(data, phi_mw, *, n14: bool = True, c13_coupling: float | None = None,
                  initial: dict | None = None, consts: NVConstants = SINGLE_NV_CONSTANTS,
                  physical: PhysicalConstants = PhysicalConstants(), n_bins: int = 15,
                  n_samples: int = 20000, rng=0,
                  rho_s_bounds: tuple[float, float] = (1e-3, 1e3),
                  gamma_bounds: tuple[float, float] | None = None,
                  max_evaluations: int = 6000) -> SingleNVResult:
    """Fit E, rho_s and Gamma of one NV to spectra at known drive angles.

    ``data`` is a :class:`Spectrum` or a sequence of them, with ``phi_mw``
    (degrees) a matching scalar or sequence. A single spectrum only fixes
    the field azimuth up to the mirror ``phi_E -> -phi_E - 4 phi_MW``;
    spectra at two or more drive angles remove it. ``consts.d_gs`` is the
    reference against which ``Pi_z`` is measured.

    ``initial`` may supply ``pi_perp``, ``phi_e``, ``pi_z``, ``rho_s`` and
    ``gamma``; missing field components are found by a coarse grid search.
    """
    spectra = [data] if isinstance(data, Spectrum) else list(data)
    phis = np.atleast_1d(np.asarray(phi_mw, dtype=float)).tolist()
    if len(phis) != len(spectra):
        raise ValidationError("need one drive angle per spectrum")
    for s in spectra:
        _check_data(s)
    initial = dict(initial or {})
    f_all = np.concatenate([s.frequency for s in spectra])
    span = float(f_all.max() - f_all.min())
    min_step = min(float(np.min(np.diff(s.frequency))) for s in spectra)
    if gamma_bounds is None:
        gamma_bounds = (min_step, span / 4)
    unit = sample_delta_bz(1.0, n_samples, as_generator(rng), consts=physical)
    model = _SingleNVModel(spectra, phis, n14, c13_coupling, consts,
                           discretize_samples(unit, n_bins))

    rho0 = float(np.clip(initial.get("rho_s", 1.0), *rho_s_bounds))
    gamma0 = float(np.clip(initial.get("gamma", max(4 * min_step, 0.1)), *gamma_bounds))
    log_rho0, log_gamma0 = np.log(rho0), np.log(gamma0)
    if {"pi_perp", "phi_e", "pi_z"} <= initial.keys():
        a = np.deg2rad(initial["phi_e"])
        theta0 = np.array([initial["pi_perp"] * np.cos(a), initial["pi_perp"] * np.sin(a),
                           initial["pi_z"], log_rho0, log_gamma0])
    else:
        theta0 = _coarse_start(model, span, log_rho0, log_gamma0,
                               pi_z_range=initial.get("pi_z_range", 0.4))

    log_bounds = np.log([rho_s_bounds, gamma_bounds])

    def bounded_cost(theta):
        if not (log_bounds[0, 0] <= theta[3] <= log_bounds[0, 1]
                and log_bounds[1, 0] <= theta[4] <= log_bounds[1, 1]):
            return np.inf
        return model.cost(theta)

    n_eval = 0
    theta = theta0
    for _ in range(3):
        opt = minimize(bounded_cost, theta, method="Nelder-Mead",
                       options={"maxfev": max_evaluations, "xatol": 1e-6, "fatol": 1e-12,
                                "adaptive": True})
        n_eval += opt.nfev
        improved = opt.fun < bounded_cost(theta) * (1 - 1e-9)
        theta = opt.x
        if opt.success and not improved:
            break
    if not np.isfinite(opt.fun):
        raise ConvergenceError("single-NV fit did not find a finite residual",
                               diagnostics={"theta": theta.tolist(), "nfev": n_eval})
    if not opt.success:
        raise ConvergenceError(f"single-NV fit did not converge: {opt.message}",
                               diagnostics={"theta": theta.tolist(), "nfev": n_eval,
                                            "residual": float(opt.fun)})
    for k, name in ((3, "rho_s"), (4, "gamma")):
        lo, hi = log_bounds[k - 3]
        if min(theta[k] - lo, hi - theta[k]) < 0.01:
            warnings.warn(f"{name} converged to its bound", stacklevel=2)

    steps = np.array([1e-4, 1e-4, 1e-4, 1e-3, 1e-3])
    r0, jac = _jacobian(lambda t: model.projected(t)[0], theta, steps)
    rss = float(r0 @ r0)
    dof = max(r0.size - 5 - 2 * len(spectra), 1)
    scale = rss / dof
    cov = np.linalg.pinv(jac.T @ jac) * scale
    _, nuis = model.projected(theta)

    pi_x, pi_y, pi_z = theta[:3]
    err = np.sqrt(np.clip(np.diag(cov), 0, None))
    e_scale = np.array([consts.d_perp, consts.d_perp, consts.d_par])
    e_vals = theta[:3] / e_scale
    e_errs = err[:3] / e_scale
    params = [FitResult(n, float(v), float(v - s), float(v + s), rss)
              for n, v, s in zip(("e_x", "e_y", "e_z"), e_vals, e_errs)]
    rho_s = float(np.exp(theta[3]))
    gamma = float(np.exp(theta[4]))
    # log-parameter errors map to asymmetric intervals
    rho_res = FitResult("rho_s", rho_s, rho_s * np.exp(-err[3]), rho_s * np.exp(err[3]), rss)
    gamma_res = FitResult("gamma", gamma, gamma * np.exp(-err[4]), gamma * np.exp(err[4]), rss)

    pi_perp = float(np.hypot(pi_x, pi_y))
    grad_perp = np.array([pi_x, pi_y]) / pi_perp if pi_perp > 0 else np.zeros(2)
    grad_phi = np.array([-pi_y, pi_x]) / pi_perp**2 if pi_perp > 0 else np.zeros(2)
    c2 = cov[:2, :2]
    perp_err = float(np.sqrt(max(grad_perp @ c2 @ grad_perp, 0.0))) if pi_perp > 0 else float(
        np.sqrt(0.5 * (c2[0, 0] + c2[1, 1])))
    phi_err = float(np.rad2deg(np.sqrt(max(grad_phi @ c2 @ grad_phi, 0.0))))
    phi_e = float(np.rad2deg(np.arctan2(pi_y, pi_x)) % 360.0)
    return SingleNVResult(
        *params, rho_res, gamma_res,
        pi_perp=(pi_perp, perp_err),
        pi_z=(float(pi_z), float(err[2])),
        phi_e=(phi_e, phi_err),
        amplitudes=[a for a, _ in nuis],
        offsets=[b for _, b in nuis],
        covariance=cov,
        residual=rss,
        n_evaluations=n_eval,
    )


def _double_lorentzian(f, c1, c2, w1, w2, a1, a2, offset):
    return (offset + a1 / (1 + ((f - c1) / (0.5 * w1)) ** 2)
            + a2 / (1 + ((f - c2) / (0.5 * w2)) ** 2))


def fit_double_lorentzian(data: Spectrum, offset: float | None = None) -> dict:
    """Least-squares fit of two Lorentzian dips plus a constant offset.

    Pass ``offset`` to hold the baseline at a known value (e.g. 0 for a
    simulated line shape). Returns the parameters (centres, FWHMs, peak
    amplitudes, offset), the model on the data grid and the residual sum
    of squares.
    """
    _check_data(data)
    f, y = data.frequency, data.contrast
    base = float(np.median(np.concatenate([y[: max(1, y.size // 20)], y[-max(1, y.size // 20):]])))
    peaks, props = find_peaks(y - base, prominence=0.05 * np.ptp(y))
    order = np.argsort(props["prominences"])[::-1]
    span = f[-1] - f[0]
    if peaks.size >= 2:
        c1, c2 = np.sort(f[peaks[order[:2]]])
    else:
        c = f[peaks[order[0]]] if peaks.size else f[np.argmax(y)]
        c1, c2 = c - span / 40, c + span / 40
    height = float(y.max() - base)
    above = f[y - base > 0.5 * height]
    w0 = max(float(above[-1] - above[0]) / 2 if above.size > 1 else span / 20,
             2 * float(np.min(np.diff(f))))
    p0 = [c1, c2, w0, w0, height, height, base]
    lower = [f[0], f[0], 1e-6, 1e-6, -np.inf, -np.inf, -np.inf]
    upper = [f[-1], f[-1], span, span, np.inf, np.inf, np.inf]
    if offset is None:
        func = _double_lorentzian
    else:
        p0, lower, upper = p0[:-1], lower[:-1], upper[:-1]

        def func(f, *p):
            return _double_lorentzian(f, *p, offset)
    try:
        popt, _ = curve_fit(func, f, y, p0=p0, bounds=(lower, upper),
                            sigma=data.sigma, maxfev=20000)
    except RuntimeError as exc:
        raise ConvergenceError(f"double-Lorentzian fit failed: {exc}") from None
    if offset is not None:
        popt = np.append(popt, offset)
    if popt[0] > popt[1]:
        popt = popt[[1, 0, 3, 2, 5, 4, 6]]
    model = _double_lorentzian(f, *popt)
    names = ("center_1", "center_2", "fwhm_1", "fwhm_2", "amplitude_1", "amplitude_2", "offset")
    return {"params": dict(zip(names, map(float, popt))), "model": model,
            "residual": float(((y - model) ** 2).sum())}


def tail_excess(data: Spectrum, fit: dict | None = None, n_widths: float = 1.0) -> float:
    """Integrated data-minus-fit contrast beyond the double-Lorentzian's lines.

    The tails are the regions more than ``n_widths`` fitted FWHMs outside
    the outer line centres. Positive values mean heavier tails than a
    double Lorentzian can produce.
    """
    fit = fit_double_lorentzian(data) if fit is None else fit
    p = fit["params"]
    lo = p["center_1"] - n_widths * p["fwhm_1"]
    hi = p["center_2"] + n_widths * p["fwhm_2"]
    f = data.frequency
    excess = data.contrast - fit["model"]
    mask = (f < lo) | (f > hi)
    if mask.sum() < 2:
        raise ValidationError("spectrum has no tail region beyond the fitted lines")
    w = np.gradient(f)
    return float((excess * w)[mask].sum())
