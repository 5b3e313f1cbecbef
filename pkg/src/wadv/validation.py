"""Input validation helpers shared by the estimator-facing API.

All helpers return numpy float64 arrays and raise package errors with the
offending field named, so CLI and library callers get the same diagnostics.
"""

import numpy as np

from .errors import DimensionMismatch, RangeViolation


def as_image(arr, name="image", check_range=True):
    """Coerce to a float64 image of shape (h, w) or (h, w, c).

    check_range enforces pixel values in [0, 1] (with a 1e-9 float slack).
    """
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 2:
        pass
    elif a.ndim == 3:
        if a.shape[2] < 1:
            raise DimensionMismatch(f"{name}: channel axis has size 0")
    else:
        raise DimensionMismatch(
            f"{name}: expected 2 or 3 dimensions, got shape {a.shape}"
        )
    if not np.all(np.isfinite(a)):
        raise RangeViolation(f"{name}: contains non-finite values")
    if check_range and (a.min() < -1e-9 or a.max() > 1 + 1e-9):
        raise RangeViolation(
            f"{name}: pixel values in [{a.min():.6g}, {a.max():.6g}] "
            "outside [0, 1]"
        )
    return a


def as_image_batch(arr, name="images"):
    """Coerce to a float64 batch of images, shape (b, h, w) or (b, h, w, c)."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim not in (3, 4):
        raise DimensionMismatch(
            f"{name}: expected a batch of images (3 or 4 dims), got {a.shape}"
        )
    return a


def check_same_shape(a, b, name_a="first", name_b="second"):
    if a.shape != b.shape:
        raise DimensionMismatch(
            f"{name_a} has shape {a.shape} but {name_b} has shape {b.shape}"
        )


def as_labels(y, n=None, name="labels"):
    """Coerce to an int64 label vector; optionally check its length."""
    arr = np.asarray(y)
    if arr.ndim != 1:
        raise DimensionMismatch(f"{name}: expected 1-d labels, got {arr.shape}")
    if n is not None and arr.shape[0] != n:
        raise DimensionMismatch(
            f"{name}: {arr.shape[0]} labels for {n} samples"
        )
    return arr.astype(np.int64)


def as_flat_features(X, name="X"):
    """Flatten (b, h, w[, c]) or accept (b, d); returns (b, d) float64."""
    a = np.asarray(X, dtype=np.float64)
    if a.ndim == 1:
        raise DimensionMismatch(f"{name}: single sample given; wrap in a batch")
    if a.ndim > 2:
        a = a.reshape(a.shape[0], -1)
    return a
