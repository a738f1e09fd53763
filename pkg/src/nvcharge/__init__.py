"""NV charge environment toolkit.

Spin model of a single NV center, Monte Carlo charge and spin baths,
ensemble and single-NV spectrum synthesis, fitting, and point-charge
localization from dark-state spectroscopy.
"""

__version__ = "0.1.0"

from .bath import (  # noqa: E402
    BathEnsemble,
    ChargeConfiguration,
    PhysicalConstants,
    SamplerConfig,
    SpinBathConfiguration,
    electric_field,
    pi_from_field,
    sample_charges,
    sample_delta_bz,
    sample_electric_fields,
    sample_spin_bath,
)
from .exceptions import (  # noqa: E402
    ConvergenceError,
    NVChargeError,
    ParseError,
    SchemaVersionError,
    ValidationError,
)
from .fitting import (  # noqa: E402
    FitResult,
    ResidualScan,
    fit_ensemble,
    fit_high_field,
    fit_single_nv,
    fit_zero_field,
    nuisance_optimize,
)
from .localization import (  # noqa: E402
    ChargeLocalization,
    ImbalanceCurve,
    NVOrientation,
    WireGeometry,
    confidence_region,
    fit_imbalance_curve,
    localize_charge,
    microwave_polarization,
    reconstruct_field,
)
from .spectra import (  # noqa: E402
    EnsembleSimConfig,
    FrequencyGrid,
    Spectrum,
    ensemble_spectrum,
    high_field_spectrum,
    lorentzian_convolve,
    single_nv_spectrum,
)
from .spin import LocalFields, NVConstants, resonance_frequencies  # noqa: E402
