"""Ground-state spin Hamiltonian of the NV center.

All couplings are ordinary frequencies in MHz. Matrices use the basis
``|m_s = +1>, |0>, |-1>`` (in that order). Angles cross the public
interface in degrees.

The |0> level decouples from the electric and axial terms, so the
Hamiltonian is a scalar plus a 2x2 block on ``{|+1>, |-1>}``; that block is
solved in closed form here. Writing ``b`` for the total axial term and
``Pi_perp`` for the transverse electric coupling, the upper (``plus``)
eigenstate is ``(|+1> - xi e^{-i phi_E} |-1>) / sqrt(1 + xi^2)`` (up to the
xi <-> 1/xi swap when ``b < 0``), with
``xi = Pi_perp / (sqrt(b^2 + Pi_perp^2) + |b|)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np

from .exceptions import DegenerateFieldError, ValidationError

__all__ = [
    "NVConstants",
    "LocalFields",
    "HyperfineState",
    "Resonance",
    "SX",
    "SY",
    "SZ",
    "build_hamiltonian",
    "axial_term",
    "resonance_frequencies",
    "dark_bright_states",
    "mixing_ratio",
    "transition_amplitudes",
    "imbalance",
    "resonances",
    "hyperfine_states",
    "line_frequencies",
    "line_amplitudes",
]

_SQ2 = np.sqrt(2.0)

SX = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=complex) / _SQ2
SY = np.array([[0, -1j, 0], [1j, 0, -1j], [0, 1j, 0]], dtype=complex) / _SQ2
SZ = np.diag([1.0, 0.0, -1.0]).astype(complex)


@dataclass(frozen=True)
class NVConstants:
    """NV ground-state parameters (MHz, and MHz per MV/m for susceptibilities)."""

    d_gs: float = 2870.0
    a_zz_n14: float = 2.16
    # 0.35 and 17 Hz cm/V expressed in MHz / (MV/m)
    d_par: float = 3.5e-3
    d_perp: float = 0.17

    def __post_init__(self):
        if self.d_par <= 0 or self.d_perp <= 0:
            raise ValidationError("electric susceptibilities must be positive")


@dataclass(frozen=True)
class LocalFields:
    """Electric couplings and axial magnetic offset seen by one NV, in MHz."""

    pi_x: float = 0.0
    pi_y: float = 0.0
    pi_z: float = 0.0
    delta_bz: float = 0.0
    b_applied: float = 0.0

    @classmethod
    def from_polar(cls, pi_perp, phi_e, pi_z=0.0, delta_bz=0.0, b_applied=0.0):
        """Build from transverse magnitude and azimuth ``phi_e`` (degrees)."""
        if pi_perp < 0:
            raise ValidationError("pi_perp must be non-negative")
        phi = np.deg2rad(phi_e)
        return cls(
            pi_x=float(pi_perp * np.cos(phi)),
            pi_y=float(pi_perp * np.sin(phi)),
            pi_z=float(pi_z),
            delta_bz=float(delta_bz),
            b_applied=float(b_applied),
        )

    @property
    def pi_perp(self) -> float:
        return float(np.hypot(self.pi_x, self.pi_y))

    @property
    def phi_e(self) -> float:
        """Transverse field azimuth in degrees, in [0, 360)."""
        return float(np.rad2deg(np.arctan2(self.pi_y, self.pi_x)) % 360.0)


@dataclass(frozen=True)
class HyperfineState:
    """Nuclear-spin sector: 14N projection and an optional secular 13C."""

    m_i: int = 0
    c13_coupling: float | None = None
    m_c: float | None = None

    def __post_init__(self):
        if self.m_i not in (-1, 0, 1):
            raise ValidationError(f"m_i must be -1, 0 or +1, got {self.m_i!r}")
        if self.c13_coupling is None:
            if self.m_c is not None:
                raise ValidationError("m_c given without a 13C coupling")
        elif self.m_c not in (-0.5, 0.5):
            raise ValidationError("m_c must be +1/2 or -1/2 when a 13C coupling is set")

    def axial_shift(self, consts: NVConstants) -> float:
        shift = consts.a_zz_n14 * self.m_i
        if self.c13_coupling is not None:
            shift += self.c13_coupling * self.m_c
        return shift


@dataclass(frozen=True)
class Resonance:
    frequency: float
    amplitude: float
    branch: Literal["plus", "minus"]
    hyperfine: HyperfineState


_DEFAULT_CONSTS = NVConstants()
_DEFAULT_HF = HyperfineState()


def axial_term(fields: LocalFields, hf: HyperfineState = _DEFAULT_HF,
               consts: NVConstants = _DEFAULT_CONSTS) -> float:
    """Total coefficient of S_z: magnetic offset, applied field and hyperfine."""
    return fields.delta_bz + fields.b_applied + hf.axial_shift(consts)


def build_hamiltonian(fields: LocalFields, hf: HyperfineState = _DEFAULT_HF,
                      consts: NVConstants = _DEFAULT_CONSTS) -> np.ndarray:
    """Full 3x3 Hamiltonian in MHz, basis ``(+1, 0, -1)``."""
    sz2 = SZ @ SZ
    h = (consts.d_gs + fields.pi_z) * sz2
    h = h + axial_term(fields, hf, consts) * SZ
    h = h + fields.pi_x * (SY @ SY - SX @ SX)
    h = h + fields.pi_y * (SX @ SY + SY @ SX)
    # products of the spin matrices leave ~1e-17 imaginary dust on the diagonal
    h = 0.5 * (h + h.conj().T)
    return h


def resonance_frequencies(fields: LocalFields, hf: HyperfineState = _DEFAULT_HF,
                          consts: NVConstants = _DEFAULT_CONSTS) -> tuple[float, float]:
    """Closed-form ``(f_minus, f_plus)`` of the 0 <-> +/- transitions, MHz."""
    center = consts.d_gs + fields.pi_z
    half = float(np.hypot(axial_term(fields, hf, consts), fields.pi_perp))
    return center - half, center + half


def dark_bright_states(fields: LocalFields) -> tuple[np.ndarray, np.ndarray]:
    """Pure-electric eigenstates ``(|+>, |->)`` over ``{|+1>, |-1>}``.

    Only valid when the axial term vanishes; use :func:`build_hamiltonian`
    and a numerical eigensolver otherwise.
    """
    if fields.pi_perp == 0.0:
        raise DegenerateFieldError("bright/dark states undefined for Pi_perp = 0")
    phase = np.exp(-1j * np.arctan2(fields.pi_y, fields.pi_x))
    plus = np.array([1.0, -phase]) / _SQ2
    minus = np.array([np.conj(phase), 1.0]) / _SQ2
    return plus, minus


def mixing_ratio(axial, pi_perp):
    """Mixing ratio xi in [0, 1] of the split eigenstates.

    Equals ``(|b|/Pi)(sqrt(1 + (Pi/b)^2) - 1)``, written in a form that is
    stable for ``b -> 0``. Defined as 1 in the fully degenerate case.
    """
    axial = np.abs(np.asarray(axial, dtype=float))
    pi_perp = np.asarray(pi_perp, dtype=float)
    denom = np.hypot(axial, pi_perp) + axial
    with np.errstate(invalid="ignore", divide="ignore"):
        xi = np.where(denom > 0, pi_perp / np.where(denom > 0, denom, 1.0), 1.0)
    return xi if xi.ndim else float(xi)


def line_amplitudes(axial, pi_perp, phi_e_rad, phi_mw_rad):
    """Vectorized ``(A_plus, A_minus)`` for a linear drive at ``phi_mw_rad``."""
    xi = mixing_ratio(axial, pi_perp)
    contrast = xi / (1.0 + xi * xi) * np.cos(2.0 * np.asarray(phi_mw_rad) + np.asarray(phi_e_rad))
    return 0.5 - contrast, 0.5 + contrast


def line_frequencies(pi_z, pi_perp, axial, d_gs):
    """Vectorized ``(f_minus, f_plus)``; arguments broadcast."""
    center = d_gs + np.asarray(pi_z, dtype=float)
    half = np.hypot(axial, pi_perp)
    return center - half, center + half


def transition_amplitudes(fields: LocalFields, hf: HyperfineState = _DEFAULT_HF,
                          phi_mw: float = 0.0,
                          consts: NVConstants = _DEFAULT_CONSTS) -> tuple[float, float]:
    """Squared matrix elements ``|<0| S_x cos phi + S_y sin phi |+/->|^2``.

    ``phi_mw`` in degrees. For a vanishing axial term this is
    ``1/2 -/+ 1/2 cos(2 phi_MW + phi_E)``; a nonzero axial term (hyperfine,
    bath, applied field) reduces the modulation by ``2 xi / (1 + xi^2)``.
    The pair always sums to one.
    """
    a_plus, a_minus = line_amplitudes(
        axial_term(fields, hf, consts),
        fields.pi_perp,
        np.arctan2(fields.pi_y, fields.pi_x),
        np.deg2rad(phi_mw),
    )
    return float(a_plus), float(a_minus)


def imbalance(fields: LocalFields, hf: HyperfineState = _DEFAULT_HF,
              phi_mw: float = 0.0, consts: NVConstants = _DEFAULT_CONSTS) -> float:
    """``(A_+ - A_-) / (A_+ + A_-)`` for the pair belonging to ``hf``."""
    a_plus, a_minus = transition_amplitudes(fields, hf, phi_mw, consts)
    return (a_plus - a_minus) / (a_plus + a_minus)


def resonances(fields: LocalFields, hf: HyperfineState = _DEFAULT_HF,
               phi_mw: float = 0.0,
               consts: NVConstants = _DEFAULT_CONSTS) -> list[Resonance]:
    f_minus, f_plus = resonance_frequencies(fields, hf, consts)
    a_plus, a_minus = transition_amplitudes(fields, hf, phi_mw, consts)
    return [
        Resonance(f_minus, a_minus, "minus", hf),
        Resonance(f_plus, a_plus, "plus", hf),
    ]


def hyperfine_states(n14: bool = True, c13_coupling: float | None = None) -> list[HyperfineState]:
    """Enumerate nuclear sectors; each is equally populated at room temperature."""
    m_is = (-1, 0, 1) if n14 else (0,)
    if c13_coupling is None:
        return [HyperfineState(m) for m in m_is]
    return [HyperfineState(m, c13_coupling, mc) for m in m_is for mc in (-0.5, 0.5)]
