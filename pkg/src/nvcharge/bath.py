"""Random charge and spin-bath environments around a single NV.

Point defects are placed uniformly in a sphere centred on the NV whose
radius is matched to the requested number density. The NV sits at the
origin; its symmetry axis is +z.

Besides the one-configuration samplers, the batch helpers
(:func:`sample_electric_fields`, :func:`sample_delta_bz`) draw many
realizations at once in fixed-size chunks, and :class:`BathEnsemble` keeps
unit-density draws that can be rescaled to any density. The rescaling is
exact in distribution: at fixed point count, positions contract as
``rho^(-1/3)``, so the electric field grows as ``rho^(2/3)`` and the
dipolar offset as ``rho``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import SingularPositionError, ValidationError
from .spin import NVConstants

__all__ = [
    "PhysicalConstants",
    "SamplerConfig",
    "ChargeConfiguration",
    "SpinBathConfiguration",
    "BathEnsemble",
    "as_generator",
    "sphere_radius",
    "sample_ball",
    "sample_charges",
    "sample_spin_bath",
    "electric_field",
    "pi_from_field",
    "delta_bz",
    "sample_electric_fields",
    "sample_delta_bz",
    "effective_spin_density",
]

_CHUNK = 8192
_V_PER_NM_TO_MV_PER_M = 1000.0


@dataclass(frozen=True)
class PhysicalConstants:
    """Material and coupling constants.

    ``n0`` converts ppm to nm^-3; ``coulomb_k`` is e/(4 pi eps0) in V nm;
    ``j0`` is the dipolar prefactor in MHz nm^3.
    """

    n0: float = 1.76e-4
    eps_r: float = 5.7
    coulomb_k: float = 1.43996
    j0: float = 52.0
    nuclear_suppression: float = 2600.0
    exclusion_radius: float = 0.15

    def __post_init__(self):
        for name in ("n0", "eps_r", "coulomb_k", "j0", "nuclear_suppression"):
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be strictly positive")
        if self.exclusion_radius < 0:
            raise ValidationError("exclusion_radius must be non-negative")


@dataclass(frozen=True)
class SamplerConfig:
    rho_c: float = 0.0
    rho_s: float = 0.0
    n_charge: int = 100
    n_spin: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.rho_c < 0 or self.rho_s < 0:
            raise ValidationError("densities must be non-negative")
        if self.n_charge < 2 or self.n_charge % 2:
            raise ValidationError("n_charge must be a positive even number")
        if self.n_spin < 1:
            raise ValidationError("n_spin must be at least 1")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


@dataclass
class ChargeConfiguration:
    positions: np.ndarray  # (n, 3) nm
    signs: np.ndarray  # (n,) +/-1


@dataclass
class SpinBathConfiguration:
    positions: np.ndarray  # (n, 3) nm
    polarizations: np.ndarray  # (n,) +/-1/2


_DEFAULT_PHYS = PhysicalConstants()
_DEFAULT_NV = NVConstants()


def as_generator(random_state=None) -> np.random.Generator:
    """Normalize ``None``, an int seed or a Generator to a Generator."""
    if isinstance(random_state, np.random.Generator):
        return random_state
    if isinstance(random_state, np.random.SeedSequence):
        return np.random.default_rng(random_state)
    if random_state is None or isinstance(random_state, (int, np.integer)):
        return np.random.default_rng(random_state)
    raise TypeError(f"cannot build a Generator from {type(random_state).__name__}")


def sphere_radius(n_points: int, rho: float, consts: PhysicalConstants = _DEFAULT_PHYS) -> float:
    """Radius (nm) of the sphere holding ``n_points`` defects at ``rho`` ppm."""
    if n_points < 1:
        raise ValidationError("n_points must be at least 1")
    if not rho > 0:
        raise ValidationError(f"density must be positive, got {rho}")
    return float((3.0 * n_points / (4.0 * np.pi * consts.n0 * rho)) ** (1.0 / 3.0))


def _radii(rng, shape, radius, r_min):
    r = radius * np.cbrt(rng.random(shape))
    bad = r < r_min
    while bad.any():
        r[bad] = radius * np.cbrt(rng.random(int(bad.sum())))
        bad = r < r_min
    return r


def sample_ball(rng, shape, radius, r_min=0.0) -> np.ndarray:
    """Uniform points in a ball, shape ``shape + (3,)``, excluding ``r < r_min``."""
    if r_min >= radius:
        raise ValidationError("exclusion radius must be smaller than the sphere")
    shape = tuple(np.atleast_1d(shape))
    r = _radii(rng, shape, radius, r_min)
    cos_t = rng.uniform(-1.0, 1.0, shape)
    phi = rng.uniform(0.0, 2.0 * np.pi, shape)
    sin_t = np.sqrt(1.0 - cos_t**2)
    return np.stack([r * sin_t * np.cos(phi), r * sin_t * np.sin(phi), r * cos_t], axis=-1)


def _balanced_signs(n):
    return np.concatenate([np.ones(n // 2), -np.ones(n // 2)])


def sample_charges(cfg: SamplerConfig, rng=None,
                   consts: PhysicalConstants = _DEFAULT_PHYS) -> ChargeConfiguration:
    """One neutral configuration of ``cfg.n_charge`` point charges."""
    rng = cfg.rng() if rng is None else as_generator(rng)
    radius = sphere_radius(cfg.n_charge, cfg.rho_c, consts)
    positions = sample_ball(rng, cfg.n_charge, radius, consts.exclusion_radius)
    return ChargeConfiguration(positions, _balanced_signs(cfg.n_charge))


def sample_spin_bath(cfg: SamplerConfig, rng=None,
                     consts: PhysicalConstants = _DEFAULT_PHYS) -> SpinBathConfiguration:
    rng = cfg.rng() if rng is None else as_generator(rng)
    radius = sphere_radius(cfg.n_spin, cfg.rho_s, consts)
    positions = sample_ball(rng, cfg.n_spin, radius, consts.exclusion_radius)
    polarizations = rng.integers(0, 2, cfg.n_spin) - 0.5
    return SpinBathConfiguration(positions, polarizations)


def electric_field(charges: ChargeConfiguration,
                   consts: PhysicalConstants = _DEFAULT_PHYS) -> np.ndarray:
    """Coulomb field at the origin in MV/m.

    The field of a positive charge points away from it, so a +1 charge at
    ``r`` produces ``-k r_hat / r^2`` at the NV.
    """
    pos = np.asarray(charges.positions, dtype=float).reshape(-1, 3)
    r = np.linalg.norm(pos, axis=1)
    if np.any(r == 0):
        raise SingularPositionError("charge located at the NV site")
    signs = np.asarray(charges.signs, dtype=float)
    weight = -signs * consts.coulomb_k / consts.eps_r / r**3
    return _V_PER_NM_TO_MV_PER_M * (weight[:, None] * pos).sum(axis=0)


def pi_from_field(e_field, consts: NVConstants = _DEFAULT_NV) -> np.ndarray:
    """Electric couplings ``(Pi_x, Pi_y, Pi_z)`` in MHz from E in MV/m.

    Accepts a single 3-vector or an ``(n, 3)`` array.
    """
    e = np.asarray(e_field, dtype=float)
    scale = np.array([consts.d_perp, consts.d_perp, consts.d_par])
    return e * scale


def delta_bz(bath: SpinBathConfiguration, consts: PhysicalConstants = _DEFAULT_PHYS) -> float:
    """Secular dipolar offset (MHz) of the NV from a mean-field spin bath."""
    pos = np.asarray(bath.positions, dtype=float).reshape(-1, 3)
    r = np.linalg.norm(pos, axis=1)
    if np.any(r == 0):
        raise SingularPositionError("bath spin located at the NV site")
    cos_t = pos[:, 2] / r
    terms = -consts.j0 / r**3 * (3.0 * cos_t**2 - 1.0) * np.asarray(bath.polarizations)
    return float(terms.sum())


def sample_electric_fields(rho_c: float, n_realizations: int, rng=None, n_charge: int = 100,
                           consts: PhysicalConstants = _DEFAULT_PHYS) -> np.ndarray:
    """Fields (MV/m) of ``n_realizations`` independent neutral configurations."""
    if n_charge < 2 or n_charge % 2:
        raise ValidationError("n_charge must be a positive even number")
    out = np.zeros((n_realizations, 3))
    if rho_c == 0:
        return out
    rng = as_generator(rng)
    radius = sphere_radius(n_charge, rho_c, consts)
    signs = _balanced_signs(n_charge)
    prefactor = -_V_PER_NM_TO_MV_PER_M * consts.coulomb_k / consts.eps_r
    for start in range(0, n_realizations, _CHUNK):
        stop = min(start + _CHUNK, n_realizations)
        pos = sample_ball(rng, (stop - start, n_charge), radius, consts.exclusion_radius)
        r3 = np.linalg.norm(pos, axis=-1) ** 3
        out[start:stop] = prefactor * np.einsum("ij,ijk->ik", signs / r3, pos)
    return out


def sample_delta_bz(rho_s: float, n_realizations: int, rng=None, n_spin: int = 100,
                    consts: PhysicalConstants = _DEFAULT_PHYS) -> np.ndarray:
    """Dipolar offsets (MHz) of ``n_realizations`` independent baths."""
    out = np.zeros(n_realizations)
    if rho_s == 0:
        return out
    rng = as_generator(rng)
    radius = sphere_radius(n_spin, rho_s, consts)
    rows = max(1, _CHUNK * 100 // n_spin)
    for start in range(0, n_realizations, rows):
        stop = min(start + rows, n_realizations)
        shape = (stop - start, n_spin)
        r = _radii(rng, shape, radius, consts.exclusion_radius)
        cos_t = rng.uniform(-1.0, 1.0, shape)
        p = rng.integers(0, 2, shape) - 0.5
        out[start:stop] = np.sum(-consts.j0 / r**3 * (3.0 * cos_t**2 - 1.0) * p, axis=1)
    return out


def effective_spin_density(rho_nuclear: float, consts: PhysicalConstants = _DEFAULT_PHYS) -> float:
    """Electron-spin density equivalent to a nuclear bath at ``rho_nuclear`` ppm."""
    return rho_nuclear / consts.nuclear_suppression


@dataclass
class BathEnsemble:
    """Unit-density (1 ppm) Monte Carlo draws, rescalable to any density.

    ``e_unit`` holds one field per charge realization; ``dbz_unit`` holds
    ``n_spin_realizations`` offsets per charge realization. Reusing one
    ensemble across a parameter scan gives common random numbers.
    """

    e_unit: np.ndarray
    dbz_unit: np.ndarray
    consts: PhysicalConstants = field(default_factory=PhysicalConstants)

    @classmethod
    def draw(cls, n_charge_realizations: int, n_spin_realizations: int, rng=None,
             n_charge: int = 100, n_spin: int = 100,
             consts: PhysicalConstants = _DEFAULT_PHYS) -> "BathEnsemble":
        if n_charge_realizations < 1 or n_spin_realizations < 1:
            raise ValidationError("realization counts must be at least 1")
        charge_seq, spin_seq = np.random.SeedSequence(
            as_generator(rng).integers(0, 2**63)
        ).spawn(2)
        e_unit = sample_electric_fields(
            1.0, n_charge_realizations, np.random.default_rng(charge_seq), n_charge, consts
        )
        dbz = sample_delta_bz(
            1.0, n_charge_realizations * n_spin_realizations,
            np.random.default_rng(spin_seq), n_spin, consts,
        )
        return cls(e_unit, dbz.reshape(n_charge_realizations, n_spin_realizations), consts)

    @property
    def n_charge_realizations(self) -> int:
        return self.e_unit.shape[0]

    @property
    def n_spin_realizations(self) -> int:
        return self.dbz_unit.shape[1]

    def fields(self, rho_c: float) -> np.ndarray:
        if rho_c < 0:
            raise ValidationError("rho_c must be non-negative")
        return self.e_unit * rho_c ** (2.0 / 3.0)

    def offsets(self, rho_s: float) -> np.ndarray:
        if rho_s < 0:
            raise ValidationError("rho_s must be non-negative")
        return self.dbz_unit * rho_s
