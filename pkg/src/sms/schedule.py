"""Variance-exploding noise schedule and data-driven sigma calibration.

The continuous schedule interpolates geometrically between sigma_min and
sigma_max; the discrete evaluation scales are the same curve sampled at
evenly spaced points, so `sigma_at((i)/(L-1))` and `eval_sigmas()[i]`
agree bit-for-bit.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np


class CalibrationError(ValueError):
    """Degenerate data: calibration cannot produce a usable sigma."""


@dataclass(frozen=True)
class NoiseSchedule:
    sigma_min: float
    sigma_max: float
    n_scales: int = 10

    def __post_init__(self):
        if not (0.0 < self.sigma_min < self.sigma_max):
            raise ValueError(f"need 0 < sigma_min < sigma_max, got {self.sigma_min}, {self.sigma_max}")
        if self.n_scales < 2:
            raise ValueError(f"need at least 2 evaluation scales, got {self.n_scales}")

    def sigma_at(self, t):
        """sigma(t) = sigma_min * (sigma_max/sigma_min)**t for t in [0,1].

        Accepts a scalar or an array of interpolation positions.  The
        endpoints return sigma_min / sigma_max exactly.
        """
        t_arr = np.asarray(t, dtype=np.float64)
        if np.any(t_arr < 0.0) or np.any(t_arr > 1.0):
            raise ValueError(f"t must lie in [0,1], got {t!r}")
        ratio = self.sigma_max / self.sigma_min
        out = self.sigma_min * ratio**t_arr
        out = np.where(t_arr == 0.0, self.sigma_min, out)
        out = np.where(t_arr == 1.0, self.sigma_max, out)
        return float(out) if np.isscalar(t) or t_arr.ndim == 0 else out

    def eval_sigmas(self):
        """Ascending geometric sequence of n_scales sigmas, endpoints exact."""
        ts = np.arange(self.n_scales) / (self.n_scales - 1)
        return np.array([self.sigma_at(float(t)) for t in ts])


def _foreground_values(image, mask):
    img = np.asarray(image, dtype=np.float64)
    if mask is None:
        return img.ravel()
    vals = img[np.asarray(mask, dtype=bool)]
    if vals.size == 0:
        raise CalibrationError("empty foreground mask")
    return vals


def calibrate_sigma_min(images, fg_masks=None):
    """Mean over images of the per-image std of foreground intensities.

    Raises CalibrationError for constant data (std 0): set sigma_min by
    hand in that case.
    """
    images = list(images)
    if len(images) < 2:
        raise ValueError(f"need at least 2 images, got {len(images)}")
    stds = []
    for i, img in enumerate(images):
        vals = _foreground_values(img, None if fg_masks is None else fg_masks[i])
        stds.append(float(vals.std()))
    result = float(np.mean(stds))
    if result <= 0.0:
        raise CalibrationError("intensity std is 0 (constant images); set sigma_min manually")
    return result


def _canonical_order(flat):
    """Content-based image ordering so subsampling ignores dataset order."""
    keys = [hashlib.sha256(np.ascontiguousarray(row).tobytes()).hexdigest() for row in flat]
    return np.argsort(keys, kind="stable")


def calibrate_sigma_max(images, subsample, seed=0, q=99.0):
    """q-th percentile (linear interpolation) of pairwise image distances.

    Distances are Euclidean over flattened intensities among `subsample`
    uniformly chosen images.  Deterministic given `seed` and invariant to
    the ordering of `images`.
    """
    flat = np.stack([np.asarray(im, dtype=np.float64).ravel() for im in images])
    n = flat.shape[0]
    if n < 2:
        raise ValueError(f"need at least 2 images, got {n}")
    if not (2 <= subsample <= n):
        raise ValueError(f"subsample must be in [2, {n}], got {subsample}")
    flat = flat[_canonical_order(flat)]
    rng = np.random.default_rng(seed)
    chosen = flat[np.sort(rng.choice(n, size=subsample, replace=False))]
    sq = (chosen * chosen).sum(axis=1)
    gram = chosen @ chosen.T
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0)
    iu = np.triu_indices(subsample, k=1)
    dists = np.sqrt(d2[iu])
    value = float(np.percentile(dists, q, method="linear"))
    if value <= 0.0:
        raise CalibrationError("all images identical (pairwise distance 0); set sigma_max manually")
    return value
