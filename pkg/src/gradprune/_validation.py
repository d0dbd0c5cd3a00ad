"""Input checks shared by the estimator wrappers."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array, column_or_1d

from .data import LabeledDataset
from .errors import InputError


def check_images(X, input_shape=None) -> np.ndarray:
    """Return ``X`` as a float64 (N, C, H, W) array with values in [0, 1].

    A 3-D array (N, H, W) is treated as single-channel.
    """
    X = check_array(X, allow_nd=True, ensure_2d=False, dtype=np.float64)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise InputError(f"expected images of shape (N, C, H, W), got {X.shape}")
    if X.min() < 0.0 or X.max() > 1.0:
        raise InputError("image values must lie in [0, 1]")
    if input_shape is not None and tuple(X.shape[1:]) != tuple(input_shape):
        raise InputError(f"images of shape {X.shape[1:]} do not match the model input {tuple(input_shape)}")
    return X


def check_labels(y, n_samples: int, n_classes=None) -> np.ndarray:
    y = column_or_1d(y, warn=True)
    if y.shape[0] != n_samples:
        raise InputError(f"{n_samples} images but {y.shape[0]} labels")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise InputError("labels must be integer class indices")
    y = y.astype(np.int64)
    if y.min() < 0:
        raise InputError("labels must be non-negative class indices")
    if n_classes is not None and y.max() >= n_classes:
        raise InputError(f"labels must lie in [0, {n_classes})")
    return y


def as_dataset(X, y, n_classes: int, input_shape=None) -> LabeledDataset:
    X = check_images(X, input_shape)
    y = check_labels(y, X.shape[0], n_classes)
    return LabeledDataset(X, y, n_classes)
