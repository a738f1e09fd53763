"""Input validation shared by the estimators."""

import numpy as np
from sklearn.utils.validation import check_array, check_X_y

from .exceptions import ValidationError
from .spectra import Spectrum


def check_spectrum_xy(X, y, sigma=None, n_columns=1):
    """Validate ``(X, y)`` for a spectral estimator and sort by frequency.

    ``X`` is ``(n,)`` or ``(n, n_columns)`` with frequency in column 0.
    Returns ``(X2d, y, sigma)`` sorted by the remaining columns, then
    frequency.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    X, y = check_X_y(X, y, dtype=float, y_numeric=True)
    if X.shape[1] != n_columns:
        raise ValidationError(f"expected {n_columns} feature column(s), got {X.shape[1]}")
    if sigma is not None:
        sigma = check_array(np.asarray(sigma, dtype=float), ensure_2d=False)
        if sigma.shape != y.shape:
            raise ValidationError("sigma must match y")
    keys = tuple(X[:, j] for j in range(n_columns - 1, -1, -1))
    order = np.lexsort(keys)
    X, y = X[order], y[order]
    if sigma is not None:
        sigma = sigma[order]
    return X, y, sigma


def check_frequencies(X):
    X = np.asarray(X, dtype=float)
    if X.ndim == 2:
        X = check_array(X, dtype=float)
        return X[:, 0]
    return check_array(X[:, None], dtype=float)[:, 0]


def as_spectrum(X, y, sigma=None) -> Spectrum:
    X, y, sigma = check_spectrum_xy(X, y, sigma)
    return Spectrum(X[:, 0], y, sigma)


def check_fitted_attr(estimator, attr):
    from sklearn.utils.validation import check_is_fitted

    check_is_fitted(estimator, attr)
