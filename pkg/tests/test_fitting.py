import warnings
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nvcharge.bath import pi_from_field
from nvcharge.exceptions import (
    DegenerateDataError,
    SingularDesignError,
    ValidationError,
)
from nvcharge.fitting import (
    SINGLE_NV_CONSTANTS,
    FitResult,
    ResidualScan,
    error_from_interval,
    fit_double_lorentzian,
    fit_ensemble,
    fit_high_field,
    fit_single_nv,
    fit_zero_field,
    nuisance_optimize,
    tail_excess,
)
from nvcharge.spectra import (
    EnsembleSimConfig,
    FrequencyGrid,
    Spectrum,
    discretize_deltabz,
    ensemble_spectrum,
    high_field_spectrum,
    single_nv_spectrum,
)


# --- closed-form pieces -----------------------------------------------------

def test_nuisance_examples(rng):
    d = rng.normal(size=50)
    assert nuisance_optimize(d, d) == (pytest.approx(1.0), pytest.approx(0.0, abs=1e-12),
                                       pytest.approx(0.0, abs=1e-20))
    a, b, r = nuisance_optimize(2 * d - 3, d)
    assert (a, b) == (pytest.approx(0.5), pytest.approx(1.5))
    assert r == pytest.approx(0.0, abs=1e-20)
    with pytest.raises(SingularDesignError):
        nuisance_optimize(np.ones(50), d)
    with pytest.raises(ValidationError):
        nuisance_optimize(d[:10], d)


@given(st.floats(0.01, 100.0), st.floats(-50.0, 50.0))
def test_nuisance_invariance(scale, shift):
    rng = np.random.default_rng(0)
    m = rng.normal(size=40)
    d = 0.7 * m + 0.1 * rng.normal(size=40)
    a, b, r = nuisance_optimize(m, d)
    a2, b2, r2 = nuisance_optimize(m, scale * d + shift)
    assert a2 == pytest.approx(scale * a, rel=1e-9)
    assert r2 == pytest.approx(scale**2 * r, rel=1e-8)


def test_weighted_nuisance_matches_lstsq(rng):
    m, d, s = rng.normal(size=30), rng.normal(size=30), rng.uniform(0.5, 2, 30)
    a, b, _ = nuisance_optimize(m, d, s)
    X = np.column_stack([m, np.ones(30)]) / s[:, None]
    ref = np.linalg.lstsq(X, d / s, rcond=None)[0]
    assert np.allclose([a, b], ref)


def test_error_from_interval_examples():
    x = np.round(np.arange(0, 4.0001, 0.1), 10)
    scan = ResidualScan(x, (x - 2) ** 2 + 10)
    assert scan.threshold == pytest.approx(11.0)
    assert error_from_interval(scan) == (pytest.approx(1.0), pytest.approx(3.0))
    assert not scan.at_edge
    flat = ResidualScan(x, np.ones_like(x))
    assert error_from_interval(flat) == (0.0, 4.0)
    mono = ResidualScan(x, 10 + x)
    assert mono.at_edge and mono.best_value == 0.0
    with pytest.raises(ValidationError):
        ResidualScan([], [])


@given(st.lists(st.floats(0.0, 1e3), min_size=2, max_size=30))
def test_interval_contains_argmin(res):
    scan = ResidualScan(np.arange(len(res), dtype=float), res)
    lo, hi = scan.interval
    assert lo <= scan.best_value <= hi


def test_fit_result_invariants():
    with pytest.raises(ValidationError):
        FitResult("x", 5.0, 6.0, 7.0, 1.0)
    with pytest.raises(ValidationError):
        FitResult("x", 5.0, 4.0, 7.0, -1.0)
    r = FitResult("x", 5.0, 4.0, 7.0, 1.0)
    assert r.errors == (1.0, 2.0) and r.contains(6.5)
    assert r.to_dict()["value"] == 5.0


# --- ensemble fits ----------------------------------------------------------

@pytest.fixture(scope="module")
def bath_cfg():
    cfg = EnsembleSimConfig(400, 20, gamma=1.16)
    return cfg, cfg.draw_bath(3)


def _high(cfg, bath, rho_s, rho_c=0.0):
    grid = FrequencyGrid.centered(2870.0 + 126.0, 12.0, 0.05)
    return high_field_spectrum(rho_s, 126.0, cfg, grid, bath=bath, rho_c=rho_c)


def _zero(cfg, bath, rho_c, rho_s):
    grid = FrequencyGrid.centered(2870.0, 12.0, 0.05)
    return ensemble_spectrum(rho_c, rho_s, cfg, grid, bath=bath)


def test_high_field_self_consistent(bath_cfg):
    cfg, bath = bath_cfg
    data = _high(cfg, bath, 70.0).scaled(0.03, 0.9)
    grid = np.arange(50.0, 91.0, 5.0)
    res, scan = fit_high_field(data, grid, replace(cfg, b_applied=126.0), bath=bath)
    assert res.value == 70.0
    assert 60 <= res.lower <= res.value <= res.upper <= 80
    # the model is resampled onto a shifted grid, so nuisances agree to ~1%
    assert res.nuisances["amplitude"] == pytest.approx(0.03, rel=0.01)
    assert res.nuisances["offset"] == pytest.approx(0.9, rel=0.01)
    assert abs(res.nuisances["shift"]) < 0.05


def test_high_field_independent_bath(bath_cfg):
    cfg, bath = bath_cfg
    data = _high(cfg, cfg.draw_bath(11), 70.0)
    res, _ = fit_high_field(data, np.arange(50.0, 91.0, 2.5), replace(cfg, b_applied=126.0),
                            bath=bath)
    assert 60 <= res.value <= 80


def test_high_field_edge_warning(bath_cfg):
    cfg, bath = bath_cfg
    data = _high(cfg, bath, 70.0)
    with pytest.warns(UserWarning, match="edge"):
        res, _ = fit_high_field(data, [20.0, 30.0, 40.0], replace(cfg, b_applied=126.0), bath=bath)
    assert res.at_edge and res.value == 40.0


def test_high_field_rejects_flat_and_short(bath_cfg):
    cfg, bath = bath_cfg
    f = np.linspace(2990, 3000, 50)
    with pytest.raises(DegenerateDataError):
        fit_high_field(Spectrum(f, np.ones(50)), [10.0], cfg, bath=bath)
    with pytest.raises(ValidationError):
        fit_high_field(Spectrum(f[:5], np.arange(5.0)), [10.0], cfg, bath=bath)
    with pytest.raises(ValidationError):
        fit_high_field(_high(cfg, bath, 70.0), [], cfg, bath=bath)


def test_zero_field_round_trip(bath_cfg):
    cfg, bath = bath_cfg
    data = _zero(cfg, bath, 1.35, 70.0)
    grid = np.round(np.arange(0.95, 1.76, 0.1), 10)
    rho_c, gamma, scan = fit_zero_field(data, 70.0, grid, cfg, bath=bath)
    assert rho_c.value == pytest.approx(1.35)
    assert gamma.value == pytest.approx(1.16, rel=0.03)
    assert gamma.lower <= gamma.value <= gamma.upper
    # identifiability: truth beats half and double
    r = dict(zip(scan.values, scan.residuals))
    r_half = fit_zero_field(data, 70.0, [0.675, 2.7], cfg, bath=bath)[2].residuals
    assert r[1.35] < min(r_half)


def test_zero_field_null_case(bath_cfg):
    cfg, bath = bath_cfg
    data = _zero(cfg, bath, 0.0, 70.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        rho_c, _, _ = fit_zero_field(data, 70.0, [0.0, 0.2, 0.5, 1.0], cfg, bath=bath)
    assert rho_c.value == 0.0


def test_zero_field_bad_bounds(bath_cfg):
    cfg, bath = bath_cfg
    with pytest.raises(ValidationError):
        fit_zero_field(_zero(cfg, bath, 1.0, 70.0), 70.0, [1.0], cfg, bath=bath,
                       gamma_bounds=(1.0, 0.5))


def _noisy(s, rng, frac=0.02):
    sig = frac * np.ptp(s.contrast)
    return Spectrum(s.frequency, s.contrast + rng.normal(0, sig, len(s)), np.full(len(s), sig))


def test_fit_ensemble_joint_and_two_step(bath_cfg, rng):
    cfg, bath = bath_cfg
    high = _noisy(_high(cfg, bath, 70.0, rho_c=1.35).scaled(2.0, 0.1), rng)
    zero = _noisy(_zero(cfg, bath, 1.35, 70.0).scaled(3.0, -0.2), rng)
    s_grid = np.linspace(0.5, 1.5, 11) * 70.0
    c_grid = np.linspace(0.5, 1.5, 11) * 1.35
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        two = fit_ensemble(high, zero, s_grid, c_grid, cfg, 126.0, bath=bath, joint=False)
        joint = fit_ensemble(high, zero, s_grid, c_grid, cfg, 126.0, bath=bath)
    for res in (two, joint):
        assert res.rho_s.value == pytest.approx(70.0, rel=0.05)
        assert res.rho_c.value == pytest.approx(1.35, rel=0.05)
        assert res.gamma.value == pytest.approx(1.16, rel=0.05)
    assert joint.rho_s.contains(70.0) and joint.rho_c.contains(1.35)
    assert set(joint.nuisances) == {"high", "zero"}
    assert joint.nuisances["zero"]["amplitude"] == pytest.approx(3.0, rel=0.02)
    d = joint.to_dict()
    assert {"rho_s", "rho_c", "gamma", "high_field_scan", "zero_field_scan"} <= d.keys()


def test_fit_ensemble_is_deterministic(bath_cfg):
    cfg, bath = bath_cfg
    high, zero = _high(cfg, bath, 70.0), _zero(cfg, bath, 1.35, 70.0)
    args = (high, zero, [60.0, 70.0, 80.0], [1.2, 1.35, 1.5], cfg, 126.0)
    a = fit_ensemble(*args, rng=1)
    b = fit_ensemble(*args, rng=1)
    assert a.to_dict() == b.to_dict()


# --- double Lorentzian and tails --------------------------------------------

def _double(f, c1, c2, w, a):
    return sum(a / (1 + ((f - c) / (w / 2)) ** 2) for c in (c1, c2))


def test_double_lorentzian_recovers_parameters():
    f = np.linspace(2860, 2880, 801)
    data = Spectrum(f, 0.2 + _double(f, 2868.5, 2871.5, 1.2, 0.4))
    fit = fit_double_lorentzian(data)
    p = fit["params"]
    assert (p["center_1"], p["center_2"]) == (pytest.approx(2868.5), pytest.approx(2871.5))
    assert p["fwhm_1"] == pytest.approx(1.2) and p["offset"] == pytest.approx(0.2)
    assert fit["residual"] < 1e-12
    fixed = fit_double_lorentzian(data, offset=0.2)
    assert fixed["params"]["offset"] == 0.2
    assert tail_excess(data, fit) == pytest.approx(0.0, abs=1e-6)


def test_tail_excess_detects_heavy_tails():
    f = np.linspace(2850, 2890, 1601)
    heavy = _double(f, 2868.5, 2871.5, 1.2, 0.4) + 0.02 * np.exp(-0.5 * ((f - 2870) / 6) ** 2)
    data = Spectrum(f, heavy)
    assert tail_excess(data, fit_double_lorentzian(data, offset=0.0), n_widths=2.0) > 0


# --- single NV ----------------------------------------------------------------

def _nv_family(pi, rho_s, gamma, phis, half_width, rng, c13=None, noise=0.0):
    c = SINGLE_NV_CONSTANTS
    e = np.array(pi) / np.array([c.d_perp, c.d_perp, c.d_par])
    grid = FrequencyGrid.centered(c.d_gs, half_width, 0.025)
    bins = discretize_deltabz(rho_s, 15, 20000, rng)
    out = []
    for phi in phis:
        s = single_nv_spectrum(e, rho_s, gamma, phi, grid, deltabz_bins=bins, consts=c,
                               c13_coupling=c13)
        if noise:
            sig = noise * np.ptp(s.contrast)
            s = Spectrum(s.frequency, s.contrast + rng.normal(0, sig, len(s)),
                         np.full(len(s), sig))
        out.append(s)
    return out


def _polar(pi_perp, phi_e, pi_z):
    a = np.deg2rad(phi_e)
    return (pi_perp * np.cos(a), pi_perp * np.sin(a), pi_z)


def test_single_nv_nv1_like(rng):
    phis = [0.0, 45.0, 90.0, 135.0]
    data = _nv_family(_polar(0.65, 124.0, 0.03), 1.0, 0.1, phis, 4.0, rng, noise=0.01)
    res = fit_single_nv(data, phis, rng=1)
    assert res.pi_perp[0] == pytest.approx(0.65, abs=3 * res.pi_perp[1] + 1e-3)
    assert res.pi_z[0] == pytest.approx(0.03, abs=3 * res.pi_z[1] + 1e-3)
    assert res.phi_e[0] == pytest.approx(124.0, abs=2.0)
    assert res.covariance.shape == (5, 5)
    assert len(res.amplitudes) == 4
    assert set(res.to_dict()) >= {"e_x", "pi_perp", "phi_e", "rho_s", "gamma"}


def test_single_nv_nv2_like_with_c13(rng):
    phis = [0.0, 60.0, 120.0]
    data = _nv_family(_polar(0.85, 236.0, 0.27), 0.5, 0.1, phis, 5.0, rng, c13=1.65)
    res = fit_single_nv(data, phis, c13_coupling=1.65, rng=2)
    assert res.pi_perp[0] == pytest.approx(0.85, abs=0.01)
    assert res.pi_z[0] == pytest.approx(0.27, abs=0.01)


def test_single_nv_zero_field_null(rng):
    phis = [0.0, 90.0]
    data = _nv_family((0.0, 0.0, 0.0), 1.0, 0.1, phis, 4.0, rng, noise=0.01)
    res = fit_single_nv(data, phis, rng=3, initial={"pi_perp": 0.05, "phi_e": 0.0, "pi_z": 0.0})
    assert res.pi_perp[0] < 3 * res.pi_perp[1] + 0.02


def test_single_nv_needs_one_angle_per_spectrum(rng):
    data = _nv_family(_polar(0.65, 124.0, 0.03), 1.0, 0.1, [0.0], 4.0, rng)
    with pytest.raises(ValidationError):
        fit_single_nv(data, [0.0, 90.0])


def test_single_nv_field_units():
    pi = np.array(_polar(0.65, 124.0, 0.03))
    e = pi / np.array([0.17, 0.17, 3.5e-3])
    assert np.allclose(pi_from_field(e, SINGLE_NV_CONSTANTS), pi)
