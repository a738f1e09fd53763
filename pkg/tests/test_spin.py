import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import numeric_resonances
from nvcharge.exceptions import DegenerateFieldError, ValidationError
from nvcharge.spin import (
    SX,
    SY,
    SZ,
    HyperfineState,
    LocalFields,
    NVConstants,
    build_hamiltonian,
    dark_bright_states,
    hyperfine_states,
    imbalance,
    mixing_ratio,
    resonance_frequencies,
    resonances,
    transition_amplitudes,
)

coupling = st.floats(-5.0, 5.0, allow_nan=False)
positive = st.floats(1e-3, 5.0)
angle = st.floats(0.0, 360.0)
m_i = st.sampled_from([-1, 0, 1])


def test_constants_defaults():
    c = NVConstants()
    assert (c.d_gs, c.a_zz_n14, c.d_par, c.d_perp) == (2870.0, 2.16, 3.5e-3, 0.17)
    assert c.d_perp / c.d_par == pytest.approx(48.6, abs=0.1)
    with pytest.raises(ValidationError):
        NVConstants(d_par=0.0)


def test_spin_operators_commutator():
    assert np.allclose(SX @ SY - SY @ SX, 1j * SZ)


def test_hamiltonian_zero_fields():
    h = build_hamiltonian(LocalFields())
    assert np.allclose(h, np.diag([2870.0, 0.0, 2870.0]))


def test_hamiltonian_transverse_coupling_element():
    h = build_hamiltonian(LocalFields(pi_x=0.65))
    assert h[0, 2] == pytest.approx(-0.65)
    assert h[2, 0] == pytest.approx(-0.65)


def test_hamiltonian_axial_terms():
    h = build_hamiltonian(LocalFields(delta_bz=1.0), HyperfineState(1))
    assert h[0, 0].real - 2870.0 == pytest.approx(3.16)
    assert h[2, 2].real - 2870.0 == pytest.approx(-3.16)


@given(coupling, coupling, coupling, coupling, m_i)
def test_hamiltonian_block_structure(px, py, pz, dbz, m):
    h = build_hamiltonian(LocalFields(px, py, pz, dbz), HyperfineState(m))
    assert np.allclose(h, h.conj().T)
    assert h[1, 0] == 0 and h[1, 2] == 0 and h[0, 1] == 0 and h[2, 1] == 0
    assert h[1, 1] == 0


def test_resonance_examples():
    assert resonance_frequencies(LocalFields()) == (2870.0, 2870.0)
    lo, hi = resonance_frequencies(LocalFields.from_polar(0.65, 0.0, pi_z=0.03))
    assert (lo, hi) == (pytest.approx(2869.38), pytest.approx(2870.68))
    lo, hi = resonance_frequencies(LocalFields(pi_x=0.5, delta_bz=1.0))
    assert hi - 2870 == pytest.approx(1.118034, abs=1e-6)
    assert 2870 - lo == pytest.approx(1.118034, abs=1e-6)


@given(coupling, coupling, coupling, coupling, st.floats(-200, 200), m_i)
def test_resonances_match_numeric_oracle(px, py, pz, dbz, b, m):
    f = LocalFields(px, py, pz, dbz, b)
    hf = HyperfineState(m)
    analytic = resonance_frequencies(f, hf)
    numeric = numeric_resonances(build_hamiltonian(f, hf))
    assert np.allclose(analytic, numeric, atol=1e-9, rtol=0)


@given(coupling, coupling, coupling, coupling, m_i)
def test_shift_without_splitting(px, py, pz, dbz, m):
    lo, hi = resonance_frequencies(LocalFields(px, py, pz, dbz), HyperfineState(m))
    assert 0.5 * (lo + hi) == pytest.approx(2870.0 + pz, abs=1e-9)


def test_dark_bright_states():
    plus, minus = dark_bright_states(LocalFields(pi_x=1.0))
    assert np.allclose(plus, np.array([1, -1]) / np.sqrt(2))
    plus, minus = dark_bright_states(LocalFields(pi_y=1.0))
    assert np.allclose(plus, np.array([1, 1j]) / np.sqrt(2))
    assert abs(np.vdot(plus, minus)) < 1e-12
    with pytest.raises(DegenerateFieldError):
        dark_bright_states(LocalFields())


@given(positive, angle)
def test_dark_bright_states_are_eigenvectors(pi_perp, phi_e):
    f = LocalFields.from_polar(pi_perp, phi_e)
    h = build_hamiltonian(f)
    block = h[np.ix_([0, 2], [0, 2])]
    plus, minus = dark_bright_states(f)
    lo, hi = resonance_frequencies(f)
    assert np.allclose(block @ plus, hi * plus)
    assert np.allclose(block @ minus, lo * minus)


def test_transition_amplitude_examples():
    # 2 phi_MW + phi_E = 0 gives a fully dark upper state
    f = LocalFields.from_polar(0.65, 0.0)
    assert transition_amplitudes(f, phi_mw=0.0) == (pytest.approx(0.0), pytest.approx(1.0))
    assert transition_amplitudes(f, phi_mw=45.0) == (pytest.approx(0.5), pytest.approx(0.5))


def test_mixing_ratio_example():
    assert mixing_ratio(2.16, 2.16) == pytest.approx(np.sqrt(2) - 1)
    assert mixing_ratio(0.0, 1.0) == 1.0
    assert mixing_ratio(0.0, 0.0) == 1.0


def _numeric_amplitudes(f, hf, phi_mw):
    w, v = np.linalg.eigh(build_hamiltonian(f, hf))
    phi = np.deg2rad(phi_mw)
    drive = SX * np.cos(phi) + SY * np.sin(phi)
    zero = np.array([0, 1, 0])
    amps = [abs(zero @ drive @ v[:, k]) ** 2 for k in (1, 2)]
    return amps[1], amps[0]


@given(positive, angle, coupling, m_i, angle)
def test_amplitudes_match_eigenvectors(pi_perp, phi_e, dbz, m, phi_mw):
    f = LocalFields.from_polar(pi_perp, phi_e, delta_bz=dbz)
    hf = HyperfineState(m)
    a_plus, a_minus = transition_amplitudes(f, hf, phi_mw)
    assert a_plus + a_minus == pytest.approx(1.0)
    assert np.allclose((a_plus, a_minus), _numeric_amplitudes(f, hf, phi_mw), atol=1e-9)


@given(positive, angle, angle)
def test_inner_imbalance_law(pi_perp, phi_e, phi_mw):
    f = LocalFields.from_polar(pi_perp, phi_e)
    expected = -np.cos(np.deg2rad(2 * phi_mw + phi_e))
    assert imbalance(f, phi_mw=phi_mw) == pytest.approx(expected, abs=1e-12)


@given(positive, angle, coupling, m_i, angle)
def test_polarization_reversal(pi_perp, phi_e, dbz, m, phi_mw):
    f = LocalFields.from_polar(pi_perp, phi_e, delta_bz=dbz)
    hf = HyperfineState(m)
    assert imbalance(f, hf, phi_mw + 90.0) == pytest.approx(-imbalance(f, hf, phi_mw), abs=1e-12)


def test_outer_imbalance_examples():
    f = LocalFields.from_polar(2.16, 0.0)
    # 2 phi_MW + phi_E = 180 degrees
    assert imbalance(f, HyperfineState(1), phi_mw=90.0) == pytest.approx(np.sqrt(0.5), abs=1e-5)
    f = LocalFields.from_polar(0.0216, 0.0)
    peak = max(abs(imbalance(f, HyperfineState(1), p)) for p in np.linspace(0, 180, 361))
    assert peak == pytest.approx(0.01, rel=0.01)


def test_outer_to_inner_limit():
    pi_perp = 0.65
    consts = NVConstants(a_zz_n14=1e-6 * pi_perp)
    f = LocalFields.from_polar(pi_perp, 124.0)
    for phi in (0.0, 28.0, 70.0):
        outer = imbalance(f, HyperfineState(1), phi, consts)
        assert outer == pytest.approx(imbalance(f, phi_mw=phi, consts=consts), abs=1e-4)


def test_nv1_imbalance_example():
    f = LocalFields.from_polar(0.65, 124.0)
    assert imbalance(f, phi_mw=28.0) == pytest.approx(1.0)


def test_hyperfine_state_validation():
    with pytest.raises(ValidationError):
        HyperfineState(2)
    with pytest.raises(ValidationError):
        HyperfineState(0, None, 0.5)
    with pytest.raises(ValidationError):
        HyperfineState(0, 1.65, None)
    assert len(hyperfine_states()) == 3
    assert len(hyperfine_states(c13_coupling=1.65)) == 6
    assert len(hyperfine_states(n14=False)) == 1


def test_c13_shift_enters_axial_term():
    hf = HyperfineState(0, 1.65, 0.5)
    lo, hi = resonance_frequencies(LocalFields(), hf)
    assert hi - lo == pytest.approx(1.65)


def test_local_fields_polar_roundtrip():
    f = LocalFields.from_polar(0.85, 236.0, 0.27)
    assert f.pi_perp == pytest.approx(0.85)
    assert f.phi_e == pytest.approx(236.0)
    with pytest.raises(ValidationError):
        LocalFields.from_polar(-1.0, 0.0)


def test_resonances_list():
    res = resonances(LocalFields.from_polar(0.65, 0.0), phi_mw=0.0)
    assert [r.branch for r in res] == ["minus", "plus"]
    assert sum(r.amplitude for r in res) == pytest.approx(1.0)
