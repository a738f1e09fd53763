"""Monte Carlo ODMR spectra for NV ensembles and single NVs.

Ensemble spectra are histograms of resonance frequencies over sampled
charge and spin-bath environments, convolved with a Lorentzian natural
linewidth. In an ensemble the field azimuth is random, so every resonance
carries equal weight. Single-NV spectra instead weight each line by its
microwave transition amplitude and average over a discretized
distribution of bath offsets.

Contrast is stored dip-positive: larger values mean a deeper ODMR dip.
The unscaled line shape integrates to one over frequency (MHz^-1).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.signal import fftconvolve

from .bath import (
    BathEnsemble,
    PhysicalConstants,
    as_generator,
    pi_from_field,
    sample_delta_bz,
)
from .exceptions import GridTooCoarseError, ValidationError
from .spin import NVConstants, hyperfine_states, line_amplitudes, line_frequencies, mixing_ratio

__all__ = [
    "FrequencyGrid",
    "Spectrum",
    "EnsembleSimConfig",
    "lorentzian",
    "lorentzian_convolve",
    "resonance_histogram",
    "ensemble_spectrum",
    "high_field_spectrum",
    "discretize_deltabz",
    "discretize_samples",
    "single_nv_lines",
    "single_nv_templates",
    "single_nv_spectrum",
    "lorentzian_sum",
]

HYPERFINE_MODES = ("n14_three_lines", "none")


@dataclass(frozen=True)
class FrequencyGrid:
    """Uniform frequency axis in MHz (inclusive of both ends)."""

    start: float
    stop: float
    n_points: int

    def __post_init__(self):
        if self.n_points < 2:
            raise ValidationError("a frequency grid needs at least two points")
        if not self.stop > self.start:
            raise ValidationError("grid stop must exceed start")

    @classmethod
    def centered(cls, center: float, half_width: float, step: float) -> "FrequencyGrid":
        n = int(round(2 * half_width / step)) + 1
        return cls(center - half_width, center + half_width, n)

    @property
    def values(self) -> np.ndarray:
        return np.linspace(self.start, self.stop, self.n_points)

    @property
    def step(self) -> float:
        return (self.stop - self.start) / (self.n_points - 1)

    @property
    def edges(self) -> np.ndarray:
        half = 0.5 * self.step
        return np.linspace(self.start - half, self.stop + half, self.n_points + 1)


@dataclass
class Spectrum:
    """Contrast on a strictly increasing frequency axis (MHz)."""

    frequency: np.ndarray
    contrast: np.ndarray
    sigma: np.ndarray | None = None

    def __post_init__(self):
        self.frequency = np.asarray(self.frequency, dtype=float)
        self.contrast = np.asarray(self.contrast, dtype=float)
        if self.frequency.ndim != 1 or self.frequency.shape != self.contrast.shape:
            raise ValidationError("frequency and contrast must be 1-D arrays of equal length")
        if self.frequency.size < 2:
            raise ValidationError("a spectrum needs at least two points")
        if np.any(np.diff(self.frequency) <= 0):
            raise ValidationError("frequencies must be strictly increasing")
        if not np.all(np.isfinite(self.contrast)) or not np.all(np.isfinite(self.frequency)):
            raise ValidationError("spectrum contains non-finite values")
        if self.sigma is not None:
            self.sigma = np.asarray(self.sigma, dtype=float)
            if self.sigma.shape != self.frequency.shape:
                raise ValidationError("sigma length does not match the grid")
            if np.any(self.sigma <= 0):
                raise ValidationError("sigma must be strictly positive")

    def __len__(self):
        return self.frequency.size

    @property
    def is_uniform(self) -> bool:
        d = np.diff(self.frequency)
        return bool(np.allclose(d, d[0], rtol=1e-9, atol=0))

    @property
    def grid(self) -> FrequencyGrid:
        if not self.is_uniform:
            raise ValidationError("spectrum is not on a uniform grid")
        return FrequencyGrid(float(self.frequency[0]), float(self.frequency[-1]), len(self))

    def scaled(self, amplitude=1.0, offset=0.0) -> "Spectrum":
        sigma = None if self.sigma is None else self.sigma * abs(amplitude)
        return Spectrum(self.frequency.copy(), offset + amplitude * self.contrast, sigma)


@dataclass(frozen=True)
class EnsembleSimConfig:
    """Monte Carlo and nuisance settings for ensemble synthesis.

    ``gamma`` is the Lorentzian FWHM and ``b_applied`` the axial field, both
    in MHz. ``amplitude``, ``offset`` and ``center_shift`` map the unit-area
    line shape onto measured contrast.
    """

    n_charge_realizations: int = 5000
    n_spin_realizations: int = 5000
    gamma: float = 0.0
    b_applied: float = 0.0
    include_hyperfine: str = "n14_three_lines"
    amplitude: float = 1.0
    offset: float = 0.0
    center_shift: float = 0.0
    n_charge: int = 100
    n_spin: int = 100
    nv: NVConstants = field(default_factory=NVConstants)
    physical: PhysicalConstants = field(default_factory=PhysicalConstants)

    def __post_init__(self):
        if self.n_charge_realizations < 1 or self.n_spin_realizations < 1:
            raise ValidationError("realization counts must be at least 1")
        if self.gamma < 0:
            raise ValidationError("gamma must be non-negative")
        if self.include_hyperfine not in HYPERFINE_MODES:
            raise ValidationError(
                f"include_hyperfine must be one of {HYPERFINE_MODES}, got {self.include_hyperfine!r}"
            )

    @property
    def m_values(self) -> tuple[int, ...]:
        return (-1, 0, 1) if self.include_hyperfine == "n14_three_lines" else (0,)

    def draw_bath(self, rng=None) -> BathEnsemble:
        return BathEnsemble.draw(
            self.n_charge_realizations, self.n_spin_realizations, rng,
            self.n_charge, self.n_spin, self.physical,
        )


def _grid_values(grid) -> np.ndarray:
    if isinstance(grid, FrequencyGrid):
        return grid.values
    values = np.asarray(grid, dtype=float)
    if values.ndim != 1 or values.size < 2 or np.any(np.diff(values) <= 0):
        raise ValidationError("grid must be a strictly increasing 1-D array")
    return values


def lorentzian(x, gamma):
    """Unit-area Lorentzian of FWHM ``gamma`` centred at zero."""
    half = 0.5 * gamma
    return half / np.pi / (np.asarray(x) ** 2 + half * half)


def _check_resolution(step, gamma):
    if gamma > 0 and step > gamma / 2:
        raise GridTooCoarseError(
            f"grid spacing {step:.4g} MHz exceeds half the linewidth ({gamma:.4g} MHz)"
        )


def _convolve_values(density, step, gamma):
    if gamma == 0:
        return density.copy()
    n = density.size
    offsets = step * np.arange(-(n - 1), n)
    full = fftconvolve(density, lorentzian(offsets, gamma) * step)
    return full[n - 1 : 2 * n - 1]


def lorentzian_convolve(histogram: Spectrum, gamma: float) -> Spectrum:
    """Convolve a density on a uniform grid with a unit-area Lorentzian.

    The kernel is evaluated at bin-centre offsets; weight whose Lorentzian
    tail falls outside the grid is lost, so pad the grid when the total
    must be conserved.
    """
    if gamma < 0:
        raise ValidationError("gamma must be non-negative")
    step = histogram.grid.step
    return Spectrum(histogram.frequency.copy(), _convolve_values(histogram.contrast, step, gamma))


def resonance_histogram(pi: np.ndarray, dbz: np.ndarray, grid: FrequencyGrid,
                        b_applied: float = 0.0, m_values: Sequence[int] = (-1, 0, 1),
                        consts: NVConstants = NVConstants(), shift: float = 0.0) -> np.ndarray:
    """Probability density (per MHz) of resonance frequencies on ``grid``.

    ``pi`` is ``(n_c, 3)`` couplings in MHz, ``dbz`` is ``(n_c, n_s)``
    offsets. Every charge/spin pair contributes both branches of every
    hyperfine line with equal weight. Frequencies off the grid are dropped.
    """
    n = grid.n_points
    lo = grid.start - 0.5 * grid.step
    counts = np.zeros(n + 2)
    n_c, n_s = dbz.shape
    rows = max(1, 400_000 // n_s)
    for start in range(0, n_c, rows):
        stop = min(start + rows, n_c)
        perp2 = (pi[start:stop, 0] ** 2 + pi[start:stop, 1] ** 2)[:, None]
        center = (consts.d_gs + shift - lo) + pi[start:stop, 2][:, None]
        for m in m_values:
            axial = dbz[start:stop] + (b_applied + consts.a_zz_n14 * m)
            half = np.sqrt(axial * axial + perp2)
            for f in (center - half, center + half):
                # bin index shifted by one; under- and overflow land in the end slots
                idx = np.clip(np.floor(f / grid.step), -1, n).astype(np.intp) + 1
                counts += np.bincount(idx.ravel(), minlength=n + 2)
    counts = counts[1:-1]
    total = 2 * len(m_values) * n_c * n_s
    return counts / (total * grid.step)


def ensemble_spectrum(rho_c: float, rho_s: float, cfg: EnsembleSimConfig, grid: FrequencyGrid,
                      rng=None, bath: BathEnsemble | None = None) -> Spectrum:
    """Zero- or low-field ensemble spectrum for charge and spin densities in ppm.

    Pass ``bath`` to reuse Monte Carlo draws across calls; otherwise one is
    drawn from ``rng``.
    """
    if rho_c < 0 or rho_s < 0:
        raise ValidationError("densities must be non-negative")
    if not isinstance(grid, FrequencyGrid):
        raise ValidationError("ensemble spectra need a uniform FrequencyGrid")
    _check_resolution(grid.step, cfg.gamma)
    if bath is None:
        bath = cfg.draw_bath(rng)
    pi = pi_from_field(bath.fields(rho_c), cfg.nv)
    density = resonance_histogram(
        pi, bath.offsets(rho_s), grid, cfg.b_applied, cfg.m_values, cfg.nv, cfg.center_shift
    )
    shape = _convolve_values(density, grid.step, cfg.gamma)
    return Spectrum(grid.values, cfg.offset + cfg.amplitude * shape)


def high_field_spectrum(rho_s: float, b_applied: float, cfg: EnsembleSimConfig,
                        grid: FrequencyGrid, rng=None, rho_c: float = 0.0,
                        bath: BathEnsemble | None = None) -> Spectrum:
    """Spectrum under a large axial field, where magnetic broadening dominates.

    The full Hamiltonian is still used, so a nonzero ``rho_c`` contributes
    its (suppressed) electric broadening.
    """
    if bath is None:
        bath = cfg.draw_bath(rng)
    if rho_c > 0:
        pi = pi_from_field(bath.fields(rho_c), cfg.nv)
        median_perp = float(np.median(np.hypot(pi[:, 0], pi[:, 1])))
        if abs(b_applied) < 10 * median_perp:
            warnings.warn(
                f"applied field {b_applied:g} MHz is below 10x the median Pi_perp "
                f"({median_perp:.3g} MHz); electric effects are not suppressed",
                stacklevel=2,
            )
    return ensemble_spectrum(rho_c, rho_s, replace(cfg, b_applied=b_applied), grid, bath=bath)


def discretize_samples(samples: np.ndarray, n_bins: int,
                       tail: float = 0.005) -> list[tuple[float, float]]:
    """Collapse samples into ``(value, probability)`` bins.

    Bins are equal-width between the ``tail`` and ``1 - tail`` quantiles;
    samples beyond are clipped into the end bins. Each bin is represented by
    the median of its members, so a single bin sits at the overall median.
    """
    if n_bins < 1:
        raise ValidationError("n_bins must be at least 1")
    samples = np.asarray(samples, dtype=float).ravel()
    if samples.size == 0:
        raise ValidationError("no samples to discretize")
    lo, hi = np.quantile(samples, [tail, 1.0 - tail])
    if n_bins == 1 or hi <= lo:
        return [(float(np.median(samples)), 1.0)]
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, samples, side="right") - 1, 0, n_bins - 1)
    order = np.argsort(idx, kind="stable")
    bounds = np.searchsorted(idx[order], np.arange(n_bins + 1))
    out = []
    for k in range(n_bins):
        members = samples[order[bounds[k] : bounds[k + 1]]]
        if members.size:
            out.append((float(np.median(members)), members.size / samples.size))
    return out


def discretize_deltabz(rho_s: float, n_bins: int, n_samples: int = 20000, rng=None,
                       n_spin: int = 100,
                       consts: PhysicalConstants = PhysicalConstants()) -> list[tuple[float, float]]:
    """Discrete approximation of the bath-offset distribution at ``rho_s`` ppm."""
    if rho_s < 0:
        raise ValidationError("rho_s must be non-negative")
    if n_bins < 1:
        raise ValidationError("n_bins must be at least 1")
    if rho_s == 0:
        return [(0.0, 1.0)]
    samples = sample_delta_bz(rho_s, n_samples, as_generator(rng), n_spin, consts)
    return discretize_samples(samples, n_bins)


def single_nv_lines(pi, phi_mw: float, bins, n14: bool = True,
                    c13_coupling: float | None = None, b_applied: float = 0.0,
                    consts: NVConstants = NVConstants()) -> tuple[np.ndarray, np.ndarray]:
    """Line positions and weights of one NV, averaged over bath-offset bins.

    Weights combine bin probability, equal hyperfine populations and the
    transition amplitude for a linear drive at ``phi_mw`` degrees; they sum
    to one.
    """
    pi = np.asarray(pi, dtype=float)
    values = np.array([b[0] for b in bins])[:, None]
    probs = np.array([b[1] for b in bins])[:, None]
    states = hyperfine_states(n14, c13_coupling)
    shifts = np.array([s.axial_shift(consts) for s in states])[None, :]
    axial = values + shifts + b_applied
    pi_perp = float(np.hypot(pi[0], pi[1]))
    phi_e = float(np.arctan2(pi[1], pi[0]))
    f_minus, f_plus = line_frequencies(pi[2], pi_perp, axial, consts.d_gs)
    a_plus, a_minus = line_amplitudes(axial, pi_perp, phi_e, np.deg2rad(phi_mw))
    w = probs / len(states)
    freqs = np.concatenate([f_minus.ravel(), f_plus.ravel()])
    weights = np.concatenate([(w * a_minus).ravel(), (w * a_plus).ravel()])
    return freqs, weights


def single_nv_templates(pi_perp: float, pi_z: float, bins, grid_values, gamma: float, *,
                        n14: bool = True, c13_coupling: float | None = None,
                        b_applied: float = 0.0,
                        consts: NVConstants = NVConstants()) -> tuple[np.ndarray, np.ndarray]:
    """Drive-independent pieces ``(S0, D)`` of a single-NV line shape.

    For any drive angle the spectrum is ``S0 + c D`` with
    ``c = cos(2 phi_MW + phi_E)``: ``S0`` holds every line at half weight
    and ``D`` moves weight from the upper to the lower branch in
    proportion to each line's mixing factor ``xi / (1 + xi^2)``.
    """
    values = np.array([b[0] for b in bins])[:, None]
    probs = np.array([b[1] for b in bins])[:, None]
    states = hyperfine_states(n14, c13_coupling)
    shifts = np.array([st.axial_shift(consts) for st in states])[None, :]
    axial = values + shifts + b_applied
    f_minus, f_plus = line_frequencies(pi_z, pi_perp, axial, consts.d_gs)
    xi = mixing_ratio(axial, pi_perp)
    w = (probs / len(states)) * np.ones_like(axial)
    g = (w * xi / (1 + xi * xi)).ravel()
    lower = lorentzian_sum(f_minus.ravel(), w.ravel(), grid_values, gamma)
    upper = lorentzian_sum(f_plus.ravel(), w.ravel(), grid_values, gamma)
    diff = lorentzian_sum(f_minus.ravel(), g, grid_values, gamma) - lorentzian_sum(
        f_plus.ravel(), g, grid_values, gamma)
    return 0.5 * (lower + upper), diff


def lorentzian_sum(freqs, weights, grid_values, gamma) -> np.ndarray:
    """Sum of unit-area Lorentzians; ``gamma == 0`` bins the sticks instead."""
    grid_values = np.asarray(grid_values, dtype=float)
    if gamma > 0:
        return (weights[None, :] * lorentzian(grid_values[:, None] - freqs[None, :], gamma)).sum(axis=1)
    edges = np.concatenate([
        [grid_values[0] - 0.5 * (grid_values[1] - grid_values[0])],
        0.5 * (grid_values[1:] + grid_values[:-1]),
        [grid_values[-1] + 0.5 * (grid_values[-1] - grid_values[-2])],
    ])
    counts = np.histogram(freqs, bins=edges, weights=weights)[0]
    return counts / np.diff(edges)


def single_nv_spectrum(e_field, rho_s: float, gamma: float, phi_mw: float, grid, *,
                       n14: bool = True, c13_coupling: float | None = None,
                       b_applied: float = 0.0, n_bins: int = 21, n_samples: int = 20000,
                       rng=None, deltabz_bins=None, amplitude: float = 1.0, offset: float = 0.0,
                       consts: NVConstants = NVConstants(),
                       physical: PhysicalConstants = PhysicalConstants()) -> Spectrum:
    """ODMR spectrum of one NV in a static field ``e_field`` (MV/m).

    ``phi_mw`` is the in-plane drive polarization in degrees from the NV
    x axis (0 reproduces a drive along x). ``deltabz_bins`` overrides the
    sampled bath discretization.
    """
    if gamma < 0:
        raise ValidationError("gamma must be non-negative")
    values = _grid_values(grid)
    bins = deltabz_bins
    if bins is None:
        bins = discretize_deltabz(rho_s, n_bins, n_samples, rng, consts=physical)
    pi = pi_from_field(e_field, consts)
    freqs, weights = single_nv_lines(pi, phi_mw, bins, n14, c13_coupling, b_applied, consts)
    shape = lorentzian_sum(freqs, weights, values, gamma)
    return Spectrum(values, offset + amplitude * shape)
