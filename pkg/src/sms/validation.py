"""Input validation helpers for the estimator API."""
from __future__ import annotations

import numpy as np


def check_images(X, name="X"):
    """Coerce to a float64 [n_samples, H, W] stack and validate finiteness."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be [n_samples, H, W] (or a single [H, W] image), got shape {arr.shape}")
    if arr.shape[0] == 0:
        raise ValueError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_masks(masks, images, name="foreground"):
    """Boolean masks matching an image stack; None passes through."""
    if masks is None:
        return None
    arr = np.asarray(masks)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.shape != images.shape:
        raise ValueError(f"{name} shape {arr.shape} does not match images {images.shape}")
    return arr.astype(bool)


def check_fitted(estimator, attribute):
    if not hasattr(estimator, attribute):
        raise RuntimeError(f"{type(estimator).__name__} is not fitted yet; call fit first")
