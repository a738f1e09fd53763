import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from nvcharge.bath import (
    BathEnsemble,
    ChargeConfiguration,
    PhysicalConstants,
    SamplerConfig,
    SpinBathConfiguration,
    as_generator,
    delta_bz,
    effective_spin_density,
    electric_field,
    pi_from_field,
    sample_ball,
    sample_charges,
    sample_delta_bz,
    sample_electric_fields,
    sample_spin_bath,
    sphere_radius,
)
from nvcharge.exceptions import SingularPositionError, ValidationError


def test_sphere_radius_examples():
    assert sphere_radius(100, 1.0) == pytest.approx(51.3, abs=0.1)
    assert sphere_radius(100, 8.0) == pytest.approx(sphere_radius(100, 1.0) / 2)
    with pytest.raises(ValidationError):
        sphere_radius(100, 0.0)
    with pytest.raises(ValidationError):
        sphere_radius(0, 1.0)


def test_constants_validation():
    with pytest.raises(ValidationError):
        PhysicalConstants(eps_r=0.0)
    with pytest.raises(ValidationError):
        SamplerConfig(n_charge=3)
    with pytest.raises(ValidationError):
        SamplerConfig(rho_c=-1.0)


def test_sample_charges_determinism_and_neutrality():
    cfg = SamplerConfig(rho_c=1.0, seed=7)
    a, b = sample_charges(cfg), sample_charges(cfg)
    assert np.array_equal(a.positions, b.positions)
    assert a.signs.sum() == 0
    r = np.linalg.norm(a.positions, axis=1)
    assert r.max() <= sphere_radius(100, 1.0)
    assert r.min() >= PhysicalConstants().exclusion_radius


def test_sample_ball_uniform_density(rng):
    radius = 10.0
    pts = sample_ball(rng, 100_000, radius)
    inner = np.mean(np.linalg.norm(pts, axis=1) < radius / 2)
    assert inner == pytest.approx(1 / 8, rel=0.02)


def test_sample_ball_rejects_bad_exclusion(rng):
    with pytest.raises(ValidationError):
        sample_ball(rng, 10, 1.0, r_min=2.0)


def test_spin_bath_polarizations(rng):
    cfg = SamplerConfig(rho_s=1.0, n_spin=100_000)
    bath = sample_spin_bath(cfg, rng)
    assert set(np.unique(bath.polarizations)) == {-0.5, 0.5}
    # mean of +-1/2 has sigma 0.5 / sqrt(n)
    assert abs(bath.polarizations.mean()) < 3 * 0.5 / np.sqrt(100_000)


def test_electric_field_examples():
    k = PhysicalConstants()
    e = electric_field(ChargeConfiguration(np.array([[0, 0, 5.0]]), np.array([1])))
    assert np.linalg.norm(e) == pytest.approx(1000 * k.coulomb_k / (k.eps_r * 25))
    assert np.linalg.norm(e) == pytest.approx(10.1, abs=0.05)
    # field of a positive charge points away from it
    assert e[2] < 0
    e = electric_field(ChargeConfiguration(np.array([[1.8, 0, 0]]), np.array([1])))
    assert np.linalg.norm(e) == pytest.approx(78, abs=0.5)


def test_electric_field_superposition():
    pos = np.array([[0, 0, 3.0], [0, 0, -3.0]])
    single = electric_field(ChargeConfiguration(pos[:1], np.array([1])))
    pair = electric_field(ChargeConfiguration(pos, np.array([1, -1])))
    assert np.allclose(pair, 2 * single)
    same = electric_field(ChargeConfiguration(np.array([[0, 0, 3.0], [0, 0, 3.0]]),
                                              np.array([1, -1])))
    assert np.allclose(same, 0)
    with pytest.raises(SingularPositionError):
        electric_field(ChargeConfiguration(np.zeros((1, 3)), np.array([1])))


def test_pi_from_field_examples():
    pi = pi_from_field([-2.1, 3.2, 9.0])
    assert np.hypot(pi[0], pi[1]) == pytest.approx(0.651, abs=1e-3)
    assert pi[2] == pytest.approx(0.0315)
    assert np.allclose(pi_from_field([1.0, 0, 0]), [0.17, 0, 0])
    assert np.allclose(pi_from_field(np.zeros(3)), 0)
    assert pi_from_field(np.ones((5, 3))).shape == (5, 3)


def test_delta_bz_examples():
    bath = SpinBathConfiguration(np.array([[0, 0, 10.0]]), np.array([0.5]))
    assert delta_bz(bath) == pytest.approx(-0.052)
    magic = np.arccos(1 / np.sqrt(3))
    pos = 4.0 * np.array([[np.sin(magic), 0, np.cos(magic)]])
    assert delta_bz(SpinBathConfiguration(pos, np.array([0.5]))) == pytest.approx(0, abs=1e-15)
    with pytest.raises(SingularPositionError):
        delta_bz(SpinBathConfiguration(np.zeros((1, 3)), np.array([0.5])))


def test_delta_bz_batch_matches_single(rng):
    cfg = SamplerConfig(rho_s=5.0)
    seed = 99
    single = delta_bz(sample_spin_bath(cfg, np.random.default_rng(seed)))
    assert np.isfinite(single)
    batch = sample_delta_bz(5.0, 100_000, rng)
    se = batch.std() / np.sqrt(batch.size)
    assert abs(np.median(batch)) < 10 * se


def test_field_batch_matches_single_configuration():
    cfg = SamplerConfig(rho_c=2.0)
    fields = np.array([electric_field(sample_charges(cfg, np.random.default_rng(s)))
                       for s in range(2000)])
    batch = sample_electric_fields(2.0, 2000, np.random.default_rng(0))
    a = np.linalg.norm(fields, axis=1)
    b = np.linalg.norm(batch, axis=1)
    assert stats.ks_2samp(a, b).pvalue > 1e-3


def test_field_directions_isotropic(rng):
    e = sample_electric_fields(1.0, 100_000, rng)
    octant = (e[:, 0] > 0) * 4 + (e[:, 1] > 0) * 2 + (e[:, 2] > 0)
    counts = np.bincount(octant, minlength=8)
    assert stats.chisquare(counts).pvalue > 0.01


def test_nuclear_bath_equivalence():
    rho_nuclear = 1.1e4
    eff = effective_spin_density(rho_nuclear)
    assert eff == pytest.approx(rho_nuclear / 2600)
    base = PhysicalConstants()
    direct = sample_delta_bz(eff, 50_000, np.random.default_rng(3))
    # weaker coupling at the full density; positions contract by 2600^(1/3),
    # so the exclusion radius contracts with them
    weak = PhysicalConstants(j0=base.j0 / 2600,
                             exclusion_radius=base.exclusion_radius / 2600 ** (1 / 3))
    suppressed = sample_delta_bz(rho_nuclear, 50_000, np.random.default_rng(3), consts=weak)
    assert suppressed.std() == pytest.approx(direct.std(), rel=0.02)
    assert np.allclose(suppressed, direct, rtol=1e-9, atol=0)


def test_zero_density_is_quiet():
    assert np.all(sample_electric_fields(0.0, 10) == 0)
    assert np.all(sample_delta_bz(0.0, 10) == 0)


def test_as_generator():
    g = np.random.default_rng(1)
    assert as_generator(g) is g
    assert isinstance(as_generator(3), np.random.Generator)
    with pytest.raises(TypeError):
        as_generator("seed")


@given(st.floats(0.01, 10.0), st.floats(0.01, 10.0))
def test_ensemble_rescaling_is_exact(rho_a, rho_b):
    bath = BathEnsemble.draw(50, 4, rng=0)
    ratio = (rho_b / rho_a) ** (2 / 3)
    assert np.allclose(bath.fields(rho_b), bath.fields(rho_a) * ratio)
    assert np.allclose(bath.offsets(rho_b), bath.offsets(rho_a) * rho_b / rho_a)


def test_ensemble_determinism_and_shape():
    a, b = BathEnsemble.draw(20, 3, rng=5), BathEnsemble.draw(20, 3, rng=5)
    assert np.array_equal(a.e_unit, b.e_unit) and np.array_equal(a.dbz_unit, b.dbz_unit)
    assert a.dbz_unit.shape == (20, 3)
    assert (a.n_charge_realizations, a.n_spin_realizations) == (20, 3)
    with pytest.raises(ValidationError):
        a.fields(-1.0)
    with pytest.raises(ValidationError):
        BathEnsemble.draw(0, 1)


def test_exclusion_rarely_triggers():
    k = PhysicalConstants()
    # probability of one uniform point landing inside r_min at 1 ppm
    frac = (k.exclusion_radius / sphere_radius(100, 1.0)) ** 3
    assert frac < 1e-6
