import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("nvcharge", max_examples=60, deadline=None)
settings.load_profile("nvcharge")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def numeric_resonances(h):
    """Oracle: transition frequencies from a generic Hermitian eigensolver.

    The |0> level sits at exactly zero, so the two nonzero eigenvalues are
    the transition frequencies.
    """
    w = np.linalg.eigvalsh(h)
    return w[1], w[2]
