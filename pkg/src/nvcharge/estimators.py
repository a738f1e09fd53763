"""Scikit-learn style wrappers around the fitting routines.

Features are frequencies in MHz (plus a second column where a family of
spectra is fitted together) and the target is dip-positive contrast.
Per-point noise goes to ``fit`` as ``sigma``.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .bath import PhysicalConstants, as_generator, sample_delta_bz
from .exceptions import ValidationError
from .fitting import (
    SINGLE_NV_CONSTANTS,
    fit_ensemble,
    fit_high_field,
    fit_single_nv,
    fit_zero_field,
)
from .localization import ImbalanceCurve, fit_imbalance_curve
from .spectra import (
    EnsembleSimConfig,
    FrequencyGrid,
    Spectrum,
    discretize_samples,
    ensemble_spectrum,
    single_nv_spectrum,
)
from ._validation import check_frequencies, check_spectrum_xy

__all__ = ["HighFieldFit", "ZeroFieldFit", "EnsembleFit", "SingleNVFit", "ImbalanceCurveFit"]


def _ensemble_curve(freqs, rho_c, rho_s, gamma, b_applied, cfg, bath, nuis):
    """Model contrast at arbitrary frequencies, via a fine uniform grid."""
    freqs = np.asarray(freqs, dtype=float)
    span = np.ptp(freqs) if freqs.size > 1 else 1.0
    step = gamma / 3 if gamma > 0 else max(span / 2000, 1e-3)
    lo, hi = freqs.min() - 2 * step, freqs.max() + 2 * step
    grid = FrequencyGrid(lo, lo + step * np.ceil((hi - lo) / step), int(np.ceil((hi - lo) / step)) + 1)
    run = replace(cfg, gamma=gamma, b_applied=b_applied, center_shift=nuis["shift"],
                  amplitude=nuis["amplitude"], offset=nuis["offset"])
    model = ensemble_spectrum(rho_c, rho_s, run, grid, bath=bath)
    return np.interp(freqs, model.frequency, model.contrast)


class _EnsembleBase(RegressorMixin, BaseEstimator):
    def _config(self) -> EnsembleSimConfig:
        return EnsembleSimConfig(
            n_charge_realizations=self.n_charge_realizations,
            n_spin_realizations=self.n_spin_realizations,
            gamma=self.gamma,
            include_hyperfine=self.include_hyperfine,
        )


class HighFieldFit(_EnsembleBase):
    """Spin-bath density from one high-field spectrum.

    Parameters
    ----------
    rho_s_grid : array-like, optional
        Candidate densities in ppm; defaults to 41 log-spaced values
        between 1 and 300.
    b_applied : float
        Axial field in MHz.
    gamma : float
        Natural linewidth (FWHM, MHz), held fixed.
    n_charge_realizations, n_spin_realizations : int
        Monte Carlo sizes of the shared bath draw.
    rho_c : float
        Charge density in ppm used in the model (usually negligible).
    random_state : int, Generator or None
    """

    def __init__(self, rho_s_grid=None, b_applied=100.0, gamma=0.5, rho_c=0.0,
                 n_charge_realizations=5000, n_spin_realizations=50,
                 include_hyperfine="n14_three_lines", max_shift=2.0, random_state=None):
        self.rho_s_grid = rho_s_grid
        self.b_applied = b_applied
        self.gamma = gamma
        self.rho_c = rho_c
        self.n_charge_realizations = n_charge_realizations
        self.n_spin_realizations = n_spin_realizations
        self.include_hyperfine = include_hyperfine
        self.max_shift = max_shift
        self.random_state = random_state

    def fit(self, X, y, sigma=None):
        X, y, sigma = check_spectrum_xy(X, y, sigma)
        grid = np.geomspace(1.0, 300.0, 41) if self.rho_s_grid is None else self.rho_s_grid
        cfg = replace(self._config(), b_applied=self.b_applied)
        self.bath_ = cfg.draw_bath(self.random_state)
        self.result_, self.scan_ = fit_high_field(
            Spectrum(X[:, 0], y, sigma), grid, cfg, rho_c=self.rho_c,
            max_shift=self.max_shift, bath=self.bath_,
        )
        self.rho_s_ = self.result_.value
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        f = check_frequencies(X)
        return _ensemble_curve(f, self.rho_c, self.rho_s_, self.gamma, self.b_applied,
                               self._config(), self.bath_, self.result_.nuisances)


class ZeroFieldFit(_EnsembleBase):
    """Charge density and linewidth from a zero-field spectrum at known ``rho_s``.

    ``gamma`` only sets the default lower search bound; the linewidth is
    fitted.
    """

    def __init__(self, rho_s=10.0, rho_c_grid=None, gamma_bounds=None,
                 n_charge_realizations=5000, n_spin_realizations=50,
                 include_hyperfine="n14_three_lines", max_shift=1.0, gamma=0.0,
                 random_state=None):
        self.rho_s = rho_s
        self.rho_c_grid = rho_c_grid
        self.gamma_bounds = gamma_bounds
        self.n_charge_realizations = n_charge_realizations
        self.n_spin_realizations = n_spin_realizations
        self.include_hyperfine = include_hyperfine
        self.max_shift = max_shift
        self.gamma = gamma
        self.random_state = random_state

    def fit(self, X, y, sigma=None):
        X, y, sigma = check_spectrum_xy(X, y, sigma)
        grid = np.geomspace(0.01, 10.0, 41) if self.rho_c_grid is None else self.rho_c_grid
        cfg = self._config()
        self.bath_ = cfg.draw_bath(self.random_state)
        self.rho_c_result_, self.gamma_result_, self.scan_ = fit_zero_field(
            Spectrum(X[:, 0], y, sigma), self.rho_s, grid, cfg,
            gamma_bounds=self.gamma_bounds, max_shift=self.max_shift, bath=self.bath_,
        )
        self.rho_c_ = self.rho_c_result_.value
        self.gamma_ = self.gamma_result_.value
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "rho_c_result_")
        f = check_frequencies(X)
        return _ensemble_curve(f, self.rho_c_, self.rho_s, self.gamma_, 0.0, self._config(),
                               self.bath_, self.rho_c_result_.nuisances)


class EnsembleFit(_EnsembleBase):
    """Joint two-spectrum fit of ``rho_s``, ``rho_c`` and Gamma.

    ``X`` has two columns, frequency and applied axial field (MHz). Rows
    with zero field form the zero-field spectrum; the remaining rows must
    share one field value and form the high-field spectrum.
    """

    def __init__(self, rho_s_grid=None, rho_c_grid=None, gamma=0.5, joint=True,
                 gamma_bounds=None, n_charge_realizations=5000, n_spin_realizations=50,
                 include_hyperfine="n14_three_lines", random_state=None):
        self.rho_s_grid = rho_s_grid
        self.rho_c_grid = rho_c_grid
        self.gamma = gamma
        self.joint = joint
        self.gamma_bounds = gamma_bounds
        self.n_charge_realizations = n_charge_realizations
        self.n_spin_realizations = n_spin_realizations
        self.include_hyperfine = include_hyperfine
        self.random_state = random_state

    @staticmethod
    def _split(X, y, sigma):
        zero = X[:, 1] == 0
        fields = np.unique(X[~zero, 1])
        if fields.size != 1 or not zero.any():
            raise ValidationError("need zero-field rows and rows at exactly one nonzero field")

        def part(mask):
            return Spectrum(X[mask, 0], y[mask], None if sigma is None else sigma[mask])

        return part(~zero), part(zero), float(fields[0])

    def fit(self, X, y, sigma=None):
        X, y, sigma = check_spectrum_xy(X, y, sigma, n_columns=2)
        high, zero, b = self._split(X, y, sigma)
        s_grid = np.geomspace(1.0, 300.0, 41) if self.rho_s_grid is None else self.rho_s_grid
        c_grid = np.geomspace(0.01, 10.0, 41) if self.rho_c_grid is None else self.rho_c_grid
        cfg = self._config()
        self.bath_ = cfg.draw_bath(self.random_state)
        self.result_ = fit_ensemble(high, zero, s_grid, c_grid, cfg, b, gamma0=self.gamma,
                                    joint=self.joint, gamma_bounds=self.gamma_bounds,
                                    bath=self.bath_)
        self.b_applied_ = b
        self.rho_s_ = self.result_.rho_s.value
        self.rho_c_ = self.result_.rho_c.value
        self.gamma_ = self.result_.gamma.value
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValidationError("X must have columns (frequency, applied field)")
        out = np.empty(X.shape[0])
        cfg = self._config()
        for b in np.unique(X[:, 1]):
            rows = X[:, 1] == b
            nuis = self.result_.nuisances["zero" if b == 0 else "high"]
            out[rows] = _ensemble_curve(X[rows, 0], self.rho_c_, self.rho_s_, self.gamma_,
                                        float(b), cfg, self.bath_, nuis)
        return out


class SingleNVFit(RegressorMixin, BaseEstimator):
    """Static field, spin-bath density and linewidth of one NV.

    ``X`` has two columns, frequency (MHz) and drive angle phi_MW
    (degrees); rows sharing an angle form one spectrum with its own
    amplitude and offset.
    """

    def __init__(self, n14=True, c13_coupling=None, n_bins=15, n_samples=20000, initial=None,
                 rho_s_bounds=(1e-3, 1e3), gamma_bounds=None, max_evaluations=6000,
                 random_state=0):
        self.n14 = n14
        self.c13_coupling = c13_coupling
        self.n_bins = n_bins
        self.n_samples = n_samples
        self.initial = initial
        self.rho_s_bounds = rho_s_bounds
        self.gamma_bounds = gamma_bounds
        self.max_evaluations = max_evaluations
        self.random_state = random_state

    def _seed(self):
        # one integer seed so fit and predict see the same bath bins
        if isinstance(self.random_state, (int, np.integer)):
            return int(self.random_state)
        return int(as_generator(self.random_state).integers(2**63))

    def fit(self, X, y, sigma=None):
        X, y, sigma = check_spectrum_xy(X, y, sigma, n_columns=2)
        phis = np.unique(X[:, 1])
        spectra = []
        for phi in phis:
            rows = X[:, 1] == phi
            spectra.append(Spectrum(X[rows, 0], y[rows], None if sigma is None else sigma[rows]))
        self.seed_ = self._seed()
        self.result_ = fit_single_nv(
            spectra, phis, n14=self.n14, c13_coupling=self.c13_coupling, initial=self.initial,
            n_bins=self.n_bins, n_samples=self.n_samples, rng=self.seed_,
            rho_s_bounds=self.rho_s_bounds, gamma_bounds=self.gamma_bounds,
            max_evaluations=self.max_evaluations,
        )
        self.phi_mw_ = phis
        self.e_vector_ = self.result_.e_vector
        self.e_errors_ = self.result_.e_errors
        self.n_features_in_ = 2
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != 2:
            raise ValidationError("X must have columns (frequency, phi_mw)")
        res = self.result_
        unit = sample_delta_bz(1.0, self.n_samples, as_generator(self.seed_),
                               consts=PhysicalConstants())
        bins = [(v * res.rho_s.value, p) for v, p in discretize_samples(unit, self.n_bins)]
        out = np.empty(X.shape[0])
        for phi in np.unique(X[:, 1]):
            rows = X[:, 1] == phi
            k = np.flatnonzero(np.isclose(self.phi_mw_, phi))
            amp = res.amplitudes[k[0]] if k.size else float(np.mean(res.amplitudes))
            off = res.offsets[k[0]] if k.size else float(np.mean(res.offsets))
            spec = single_nv_spectrum(
                res.e_vector, res.rho_s.value, res.gamma.value, float(phi), X[rows, 0],
                n14=self.n14, c13_coupling=self.c13_coupling, deltabz_bins=bins,
                amplitude=amp, offset=off, consts=SINGLE_NV_CONSTANTS,
            )
            out[rows] = spec.contrast
        return out


class ImbalanceCurveFit(RegressorMixin, BaseEstimator):
    """Fit of ``I = -A cos(2 phi_MW + phi_E)`` to imbalance vs drive angle."""

    def __init__(self, absolute_sigma=None):
        self.absolute_sigma = absolute_sigma

    def fit(self, X, y, sigma=None):
        X, y, sigma = check_spectrum_xy(X, y, sigma)
        self.result_ = fit_imbalance_curve(ImbalanceCurve(X[:, 0], y, sigma),
                                           absolute_sigma=self.absolute_sigma)
        self.phi_e_ = self.result_.phi_e
        self.amplitude_ = self.result_.amplitude
        self.n_features_in_ = 1
        return self

    def predict(self, X):
        check_is_fitted(self, "result_")
        return self.result_.predict(check_frequencies(X))
