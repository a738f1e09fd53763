"""Dark-state spectroscopy: drive polarization, imbalance, field and charge position.

Frames: the lab frame has X, Y in the diamond's (100) top face and Z along
its normal; the NV frame has z along the NV axis and x along the transverse
projection of one carbon-vacancy bond. Linear microwave polarization is
headless, so drive angles are reported modulo 180 degrees.

Field convention: the field of a positive charge points away from it. A
+1 charge therefore sits *opposite* to the measured field direction,
``position = -sign * d * E_hat`` with ``d = sqrt(k / (eps_r |E|))``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.stats import chi2

from .bath import ChargeConfiguration, PhysicalConstants, as_generator, electric_field
from .exceptions import InsufficientSpanError, ValidationError, ZeroFieldError
from .spectra import Spectrum
from .spin import NVConstants

__all__ = [
    "WireGeometry",
    "NVOrientation",
    "MWAngleDistribution",
    "ImbalanceCurve",
    "ImbalanceEstimate",
    "ImbalanceFit",
    "FieldEstimate",
    "ChargePosition",
    "ChargeLocalization",
    "wire_field_direction",
    "microwave_polarization",
    "mw_angle_uncertainty",
    "fit_imbalance_curve",
    "six_point_imbalance",
    "six_point_frequencies",
    "integrated_imbalance",
    "fitted_imbalance",
    "reconstruct_field",
    "localize_charge",
    "confidence_region",
]

_V_PER_NM_TO_MV_PER_M = 1000.0
_TETRAHEDRAL = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=float) / np.sqrt(3)


@dataclass(frozen=True)
class WireGeometry:
    """Straight microwave wire above the NV plane.

    ``phi_wire`` is the in-plane wire angle from lab X (degrees), ``h`` the
    wire height above the NV (um) and ``r`` the signed in-plane distance of
    the NV from the wire's footprint, measured along ``Z x wire`` (um).
    ``tilt`` tilts the wire out of plane (degrees); ``h_sigma`` and
    ``tilt_sigma`` describe the Monte Carlo uncertainty.
    """

    phi_wire: float = 0.0
    h: float = 550.0
    r: float = 0.0
    tilt: float = 0.0
    h_sigma: float = 100.0
    tilt_sigma: float = 10.0

    def __post_init__(self):
        if not self.h > 0:
            raise ValidationError("wire height must be positive")
        if self.h_sigma < 0 or self.tilt_sigma < 0:
            raise ValidationError("uncertainties must be non-negative")


@dataclass(frozen=True)
class NVOrientation:
    """One of the four <111> NV axes in a (100)-cut diamond.

    ``bond`` picks which of the three remaining tetrahedral bonds defines
    the NV x axis.
    """

    axis: int = 0
    bond: int = 0

    def __post_init__(self):
        if self.axis not in range(4):
            raise ValidationError("axis must be 0, 1, 2 or 3")
        if self.bond not in range(3):
            raise ValidationError("bond must be 0, 1 or 2")

    @property
    def rotation(self) -> np.ndarray:
        """Rows are the NV x, y, z axes in lab coordinates (``v_nv = R @ v_lab``)."""
        z = _TETRAHEDRAL[self.axis]
        others = [v for i, v in enumerate(_TETRAHEDRAL) if i != self.axis]
        c = others[self.bond]
        x = c - (c @ z) * z
        x = x / np.linalg.norm(x)
        y = np.cross(z, x)
        return np.vstack([x, y, z])


class MWAngleDistribution(NamedTuple):
    samples: np.ndarray
    mean: float
    std: float


def wire_field_direction(wire: WireGeometry, tilt: float | None = None,
                         h: float | None = None) -> np.ndarray:
    """Unit direction (lab frame) of the wire's azimuthal field at the NV."""
    tilt = np.deg2rad(wire.tilt if tilt is None else tilt)
    h = wire.h if h is None else h
    phi = np.deg2rad(wire.phi_wire)
    u = np.array([np.cos(tilt) * np.cos(phi), np.cos(tilt) * np.sin(phi), np.sin(tilt)])
    normal = np.array([-np.sin(phi), np.cos(phi), 0.0])
    foot = np.array([0.0, 0.0, h]) - wire.r * normal
    d = -foot
    rho = d - (d @ u) * u
    b = np.cross(u, rho)
    norm = np.linalg.norm(b)
    if norm == 0:
        raise ValidationError("NV lies on the wire axis")
    return b / norm


def _project(b_lab, nv: NVOrientation) -> float:
    b_nv = nv.rotation @ b_lab
    if np.hypot(b_nv[0], b_nv[1]) < 1e-12 * np.linalg.norm(b_nv):
        raise ValidationError("microwave field is parallel to the NV axis; no transverse drive")
    return float(np.rad2deg(np.arctan2(b_nv[1], b_nv[0])) % 180.0)


def microwave_polarization(wire: WireGeometry, nv: NVOrientation) -> float:
    """Drive polarization angle in the NV transverse plane, degrees in [0, 180)."""
    return _project(wire_field_direction(wire), nv)


def _circular_stats(angles_deg):
    z = np.mean(np.exp(2j * np.deg2rad(angles_deg)))
    mean = float(np.rad2deg(np.angle(z)) / 2 % 180.0)
    r = min(abs(z), 1.0)
    std = float(np.rad2deg(np.sqrt(max(-2.0 * np.log(r), 0.0))) / 2)
    return mean, std


def mw_angle_uncertainty(wire: WireGeometry, nv: NVOrientation, n_mc: int = 1000,
                         rng=None) -> MWAngleDistribution:
    """Spread of the drive angle under wire tilt ~ U(+-tilt_sigma) and h ~ N(h, h_sigma)."""
    if n_mc < 100:
        raise ValidationError("n_mc must be at least 100")
    rng = as_generator(rng)
    tilts = rng.uniform(-wire.tilt_sigma, wire.tilt_sigma, n_mc) + wire.tilt
    heights = rng.normal(wire.h, wire.h_sigma, n_mc)
    bad = heights <= 0
    while bad.any():
        heights[bad] = rng.normal(wire.h, wire.h_sigma, int(bad.sum()))
        bad = heights <= 0
    samples = np.array([
        _project(wire_field_direction(wire, t, h), nv) for t, h in zip(tilts, heights)
    ])
    mean, std = _circular_stats(samples)
    return MWAngleDistribution(samples, mean, std)


@dataclass
class ImbalanceCurve:
    """Imbalance measured at several drive angles (degrees)."""

    phi_mw: np.ndarray
    imbalance: np.ndarray
    uncertainty: np.ndarray | None = None

    def __post_init__(self):
        self.phi_mw = np.asarray(self.phi_mw, dtype=float).ravel()
        self.imbalance = np.asarray(self.imbalance, dtype=float).ravel()
        if self.phi_mw.shape != self.imbalance.shape:
            raise ValidationError("phi_mw and imbalance lengths differ")
        # noisy estimates may stray slightly outside the physical range [-1, 1]
        if not np.all(np.isfinite(self.imbalance)):
            raise ValidationError("imbalance values must be finite")
        if self.uncertainty is not None:
            self.uncertainty = np.asarray(self.uncertainty, dtype=float).ravel()
            if self.uncertainty.shape != self.imbalance.shape or np.any(self.uncertainty <= 0):
                raise ValidationError("uncertainties must be positive, one per point")


class ImbalanceEstimate(NamedTuple):
    value: float
    uncertainty: float = float("nan")


@dataclass
class ImbalanceFit:
    phi_e: float
    phi_e_err: float
    amplitude: float
    amplitude_err: float
    residual: float
    covariance: np.ndarray = field(repr=False, default=None)

    def predict(self, phi_mw):
        phi = np.deg2rad(np.asarray(phi_mw, dtype=float))
        return -self.amplitude * np.cos(2 * phi + np.deg2rad(self.phi_e))

    def to_dict(self) -> dict:
        return {
            "phi_e": self.phi_e,
            "phi_e_err": self.phi_e_err,
            "amplitude": self.amplitude,
            "amplitude_err": self.amplitude_err,
            "residual": self.residual,
        }


def _headless_span(phi_deg) -> float:
    a = np.sort(np.mod(phi_deg, 180.0))
    gaps = np.diff(np.concatenate([a, [a[0] + 180.0]]))
    return float(180.0 - gaps.max())


def fit_imbalance_curve(curve: ImbalanceCurve, absolute_sigma: bool | None = None) -> ImbalanceFit:
    """Least-squares fit of ``I = -A cos(2 phi_MW + phi_E)``.

    Linear in ``(-A cos phi_E, A sin phi_E)``. Errors come from the
    covariance, scaled by the reduced chi-square unless the curve carries
    uncertainties (``absolute_sigma`` overrides).
    """
    n = curve.phi_mw.size
    if n < 4:
        raise InsufficientSpanError(f"need at least 4 points, got {n}")
    if _headless_span(curve.phi_mw) < 90.0 - 1e-9:
        raise InsufficientSpanError("drive angles must span at least 90 degrees")
    phi = np.deg2rad(curve.phi_mw)
    X = np.column_stack([np.cos(2 * phi), np.sin(2 * phi)])
    y = curve.imbalance
    w = np.ones(n) if curve.uncertainty is None else 1.0 / curve.uncertainty**2
    if absolute_sigma is None:
        absolute_sigma = curve.uncertainty is not None
    xtw = X.T * w
    cov = np.linalg.inv(xtw @ X)
    coef = cov @ (xtw @ y)
    resid = y - X @ coef
    chi2_val = float((w * resid**2).sum())
    if not absolute_sigma:
        cov = cov * chi2_val / max(n - 2, 1)
    c, s = coef
    amplitude = float(np.hypot(c, s))
    phi_e = float(np.rad2deg(np.arctan2(s, -c)) % 360.0)
    if amplitude > 0:
        g_amp = np.array([c, s]) / amplitude
        g_phi = np.array([s, -c]) / amplitude**2
        amp_err = float(np.sqrt(g_amp @ cov @ g_amp))
        phi_err = float(np.rad2deg(np.sqrt(g_phi @ cov @ g_phi)))
    else:
        amp_err = float(np.sqrt(0.5 * np.trace(cov)))
        phi_err = 180.0
    if amplitude < max(2 * amp_err, 1e-9):
        warnings.warn("imbalance amplitude is consistent with zero; phi_E is unconstrained",
                      stacklevel=2)
    return ImbalanceFit(phi_e, phi_err, amplitude, amp_err, chi2_val, cov)


def six_point_imbalance(plus_points, minus_points, baseline_points,
                        sigma: float | None = None) -> ImbalanceEstimate:
    """Imbalance from dip samples at each inner resonance and at the baseline.

    Amplitudes are mean contrast at each resonance minus the mean baseline
    (dip-positive contrast). ``sigma`` is the per-point contrast noise, used
    to propagate an uncertainty.
    """
    plus = np.asarray(plus_points, dtype=float).ravel()
    minus = np.asarray(minus_points, dtype=float).ravel()
    base = np.asarray(baseline_points, dtype=float).ravel()
    if min(plus.size, minus.size, base.size) == 0:
        raise ValidationError("each point group needs at least one sample")
    a_plus = plus.mean() - base.mean()
    a_minus = minus.mean() - base.mean()
    if a_plus < 0 or a_minus < 0:
        warnings.warn("baseline lies above a resonance; amplitude is negative", stacklevel=2)
    total = a_plus + a_minus
    if total == 0:
        raise ValidationError("total resonance weight is zero")
    value = float((a_plus - a_minus) / total)
    if sigma is None:
        return ImbalanceEstimate(value)
    vb = sigma**2 / base.size
    cov = np.array([[sigma**2 / plus.size + vb, vb], [vb, sigma**2 / minus.size + vb]])
    g = np.array([2 * a_minus, -2 * a_plus]) / total**2
    return ImbalanceEstimate(value, float(np.sqrt(g @ cov @ g)))


def six_point_frequencies(f_minus: float, f_plus: float, spacing: float,
                          baseline: tuple[float, float]) -> np.ndarray:
    """The six probe frequencies: a close pair at each inner line plus two baseline points.

    Ordered ``[minus-, minus+, plus-, plus+, base0, base1]``.
    """
    h = 0.5 * spacing
    return np.array([f_minus - h, f_minus + h, f_plus - h, f_plus + h, *baseline], dtype=float)


def _segment_weights(f, lo, hi):
    """Trapezoid weights ``w`` with ``integral_lo^hi c df = w @ c`` (linear interpolation)."""
    w = np.zeros(f.size)
    knots = np.concatenate([[lo], f[(f > lo) & (f < hi)], [hi]])
    for a, b in zip(knots[:-1], knots[1:]):
        for x, half in ((a, 0.5 * (b - a)), (b, 0.5 * (b - a))):
            k = int(np.clip(np.searchsorted(f, x, side="right") - 1, 0, f.size - 2))
            t = (x - f[k]) / (f[k + 1] - f[k])
            w[k] += half * (1 - t)
            w[k + 1] += half * t
    return w


def integrated_imbalance(spectrum: Spectrum, center_freq: float,
                         baseline: float | None = None) -> ImbalanceEstimate:
    """Imbalance from baseline-subtracted dip area above vs below ``center_freq``.

    The baseline defaults to the mean of the outermost 5 % of points on
    each side.
    """
    f, c = spectrum.frequency, spectrum.contrast
    if not f[0] < center_freq < f[-1]:
        raise ValidationError("center frequency must lie inside the spectrum")
    n_edge = max(1, f.size // 20)
    base_w = np.zeros(f.size)
    if baseline is None:
        base_w[:n_edge] = base_w[-n_edge:] = 0.5 / n_edge
    w_minus = _segment_weights(f, f[0], center_freq)
    w_plus = _segment_weights(f, center_freq, f[-1])
    # subtracting a baseline b removes b * (segment length) from each area
    u_minus = w_minus - (center_freq - f[0]) * base_w
    u_plus = w_plus - (f[-1] - center_freq) * base_w
    b_const = 0.0 if baseline is None else float(baseline)
    w_m = float(u_minus @ c) - b_const * (center_freq - f[0])
    w_p = float(u_plus @ c) - b_const * (f[-1] - center_freq)
    total = w_p + w_m
    if total == 0:
        raise ValidationError("total integrated weight is zero")
    value = (w_p - w_m) / total
    if spectrum.sigma is None:
        return ImbalanceEstimate(float(value))
    s2 = spectrum.sigma**2
    g_p, g_m = 2 * w_m / total**2, -2 * w_p / total**2
    grad = g_p * u_plus + g_m * u_minus
    return ImbalanceEstimate(float(value), float(np.sqrt((grad**2 * s2).sum())))


def fitted_imbalance(spectrum: Spectrum, s0, d) -> ImbalanceEstimate:
    """Imbalance from a linear fit ``y = alpha S0 + beta D + offset``.

    ``S0`` and ``D`` are the drive-independent templates of the NV's line
    shape (see :func:`nvcharge.spectra.single_nv_templates`). The estimate
    ``-beta / alpha`` follows ``-cos(2 phi_MW + phi_E)`` with unit
    amplitude whatever the hyperfine and bath structure, and uses every
    data point with its noise weight.
    """
    y = spectrum.contrast
    s0, d = np.asarray(s0, dtype=float).ravel(), np.asarray(d, dtype=float).ravel()
    if s0.size != y.size or d.size != y.size:
        raise ValidationError("templates must match the spectrum grid")
    X = np.column_stack([s0, d, np.ones(y.size)])
    w = np.ones(y.size) if spectrum.sigma is None else 1.0 / spectrum.sigma**2
    xtw = X.T * w
    try:
        cov = np.linalg.inv(xtw @ X)
    except np.linalg.LinAlgError:
        raise ValidationError("templates are degenerate; imbalance is undetermined") from None
    alpha, beta, _ = cov @ (xtw @ y)
    if alpha <= 0:
        raise ValidationError("fitted line weight is not positive")
    value = float(-beta / alpha)
    if spectrum.sigma is None:
        resid = y - X @ np.array([alpha, beta, _])
        cov = cov * float((w * resid**2).sum()) / max(y.size - 3, 1)
    g = np.array([beta / alpha**2, -1.0 / alpha])
    return ImbalanceEstimate(value, float(np.sqrt(g @ cov[:2, :2] @ g)))


@dataclass
class FieldEstimate:
    e_vector: np.ndarray
    covariance: np.ndarray

    @property
    def errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.covariance))

    @property
    def magnitude(self) -> float:
        return float(np.linalg.norm(self.e_vector))


def reconstruct_field(pi_z: float, pi_perp: float, phi_e: float,
                      consts: NVConstants = NVConstants(),
                      errors: tuple[float, float, float] = (0.0, 0.0, 0.0)) -> FieldEstimate:
    """Electric field (MV/m) from shift, splitting and azimuth (degrees).

    ``errors`` are the 1-sigma uncertainties of ``(pi_z, pi_perp, phi_e)``,
    propagated to first order.
    """
    if pi_perp < 0:
        raise ValidationError("pi_perp must be non-negative")
    phi = np.deg2rad(phi_e)
    e = np.array([
        pi_perp * np.cos(phi) / consts.d_perp,
        pi_perp * np.sin(phi) / consts.d_perp,
        pi_z / consts.d_par,
    ])
    jac = np.array([
        [0.0, np.cos(phi) / consts.d_perp, -pi_perp * np.sin(phi) / consts.d_perp],
        [0.0, np.sin(phi) / consts.d_perp, pi_perp * np.cos(phi) / consts.d_perp],
        [1.0 / consts.d_par, 0.0, 0.0],
    ])
    s = np.array([errors[0], errors[1], np.deg2rad(errors[2])])
    cov = jac @ np.diag(s**2) @ jac.T
    return FieldEstimate(e, cov)


class ChargePosition(NamedTuple):
    position: np.ndarray
    distance: float


def localize_charge(e_vector, sign: int = 1,
                    consts: PhysicalConstants = PhysicalConstants()) -> ChargePosition:
    """Position (nm) of the single point charge producing ``e_vector`` (MV/m)."""
    if sign not in (1, -1):
        raise ValidationError("sign must be +1 or -1")
    e = np.asarray(e_vector, dtype=float)
    mag = np.linalg.norm(e)
    if mag == 0:
        raise ZeroFieldError("cannot localize a charge from a zero field")
    d = np.sqrt(consts.coulomb_k / (consts.eps_r * mag / _V_PER_NM_TO_MV_PER_M))
    return ChargePosition(-sign * d * e / mag, float(d))


@dataclass
class ChargeLocalization:
    """Best position plus a Monte Carlo cloud with nested confidence labels.

    ``labels[i]`` is the index of the smallest level whose region holds
    sample ``i`` (``-1`` when outside every level). Regions are the images
    of the Gaussian field-error ellipsoids, so membership is decided in
    field space.
    """

    e_vector: np.ndarray
    e_covariance: np.ndarray
    charge_sign: int
    position: np.ndarray
    distance: float
    cloud: np.ndarray
    labels: np.ndarray
    levels: tuple
    physical: PhysicalConstants = field(default_factory=PhysicalConstants)

    @property
    def e_errors(self) -> np.ndarray:
        return np.sqrt(np.diag(self.e_covariance))

    def _mahalanobis2(self, e):
        d = np.atleast_2d(e) - self.e_vector
        prec = np.linalg.pinv(self.e_covariance)
        m2 = np.einsum("ij,jk,ik->i", d, prec, d)
        # deviations along zero-variance directions are never allowed
        proj = d - d @ (self.e_covariance @ prec)
        off = np.linalg.norm(proj, axis=1) > 1e-9 * max(1.0, np.linalg.norm(self.e_vector))
        m2[off] = np.inf
        return m2

    def contains(self, position, level: float = 0.68) -> bool:
        """Whether ``position`` (nm) lies inside the ``level`` confidence region."""
        e = electric_field(ChargeConfiguration(np.atleast_2d(position), [self.charge_sign]),
                           self.physical)
        return bool(self._mahalanobis2(e)[0] <= chi2.ppf(level, 3))

    def fraction(self, level_index: int) -> float:
        return float(np.mean((self.labels >= 0) & (self.labels <= level_index)))

    def to_dict(self) -> dict:
        return {
            "e_vector": self.e_vector.tolist(),
            "e_errors": self.e_errors.tolist(),
            "charge_sign": self.charge_sign,
            "position": self.position.tolist(),
            "distance": self.distance,
            "levels": list(self.levels),
            "n_samples": int(self.cloud.shape[0]),
        }


def confidence_region(e_vector, e_errors, n_mc: int = 10000, rng=None,
                      levels=(0.68, 0.95), sign: int = 1, sign_agnostic_z: bool = False,
                      consts: PhysicalConstants = PhysicalConstants()) -> ChargeLocalization:
    """Sample field errors and map every sample to a charge position.

    ``e_errors`` is three independent 1-sigma values or a 3x3 covariance.
    With ``sign_agnostic_z`` the cloud is doubled with E_z mirrored, for
    when the sign of the axial susceptibility is in doubt.
    """
    if n_mc < 1000:
        raise ValidationError("n_mc must be at least 1000")
    levels = tuple(sorted(levels))
    if any(not 0 < p < 1 for p in levels):
        raise ValidationError("confidence levels must lie in (0, 1)")
    e = np.asarray(e_vector, dtype=float)
    err = np.asarray(e_errors, dtype=float)
    cov = np.diag(err**2) if err.ndim == 1 else err
    best = localize_charge(e, sign, consts)
    rng = as_generator(rng)
    samples = rng.multivariate_normal(e, cov, size=n_mc, method="eigh")
    if sign_agnostic_z:
        samples = np.vstack([samples, samples * np.array([1.0, 1.0, -1.0])])
    mags = np.linalg.norm(samples, axis=1)
    samples = samples[mags > 0]
    mags = mags[mags > 0]
    d = np.sqrt(consts.coulomb_k / (consts.eps_r * mags / _V_PER_NM_TO_MV_PER_M))
    cloud = -sign * d[:, None] * samples / mags[:, None]
    loc = ChargeLocalization(e, cov, sign, best.position, best.distance, cloud,
                             np.empty(0, dtype=int), levels, consts)
    m2 = np.einsum("ij,jk,ik->i", samples - e, np.linalg.pinv(cov), samples - e)
    if sign_agnostic_z:
        mirrored = np.arange(samples.shape[0]) >= n_mc
        m2[mirrored] = np.einsum("ij,jk,ik->i", samples[mirrored] * [1, 1, -1] - e,
                                 np.linalg.pinv(cov), samples[mirrored] * [1, 1, -1] - e)
    quantiles = chi2.ppf(levels, 3)
    labels = np.full(samples.shape[0], -1, dtype=int)
    for k in range(len(levels) - 1, -1, -1):
        labels[m2 <= quantiles[k]] = k
    loc.labels = labels
    return loc
