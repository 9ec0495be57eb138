"""Non-spatial baseline: a GMM density over whole-image score norms.

The baseline shares the trained score backbone and patch decomposition
with the spatial model; only the density differs.  Its GMM is fit by EM
on whole-image norm vectors (log1p-transformed like the patch features).
To produce a localizable heatmap comparable to the spatial method, the
whole-image model is evaluated on per-patch norms rescaled by
sqrt(patch pixels / image pixels) - the minimal scale adaptation, since a
sample-wise detector has no native notion of patches.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .features import PatchGrid
from .inference import heatmap_from_patch_nll

_LOG_2PI = float(np.log(2.0 * np.pi))


class GMMFitError(RuntimeError):
    pass


@dataclass
class DiagonalGMM:
    weights: np.ndarray  # [K]
    means: np.ndarray  # [K,L]
    variances: np.ndarray  # [K,L]
    log_likelihood_history: list = field(default_factory=list)

    @property
    def n_components(self):
        return len(self.weights)

    def _log_resp_unnorm(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        diff = x[:, None, :] - self.means[None]
        quad = (diff * diff / self.variances[None]).sum(axis=2)
        logdet = np.log(self.variances).sum(axis=1)
        return np.log(self.weights)[None] - 0.5 * (quad + logdet[None] + x.shape[1] * _LOG_2PI)

    def log_prob(self, x):
        lr = self._log_resp_unnorm(x)
        m = lr.max(axis=1, keepdims=True)
        return (m + np.log(np.exp(lr - m).sum(axis=1, keepdims=True)))[:, 0]

    def to_dict(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "variances": self.variances.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            weights=np.asarray(d["weights"], dtype=np.float64),
            means=np.asarray(d["means"], dtype=np.float64),
            variances=np.asarray(d["variances"], dtype=np.float64),
        )


def _kmeanspp_init(data, k, rng):
    centers = [data[rng.integers(0, len(data))]]
    for _ in range(k - 1):
        d2 = np.min([(np.square(data - c).sum(axis=1)) for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(data[rng.integers(0, len(data))])
            continue
        centers.append(data[rng.choice(len(data), p=d2 / total)])
    return np.stack(centers)


def _em_once(data, k, rng, tol, max_iter):
    n, dim = data.shape
    means = _kmeanspp_init(data, k, rng)
    global_var = np.maximum(data.var(axis=0), 1e-6)
    variances = np.tile(global_var, (k, 1))
    weights = np.full(k, 1.0 / k)
    gmm = DiagonalGMM(weights=weights, means=means, variances=variances)
    prev = -np.inf
    for _ in range(max_iter):
        lr = gmm._log_resp_unnorm(data)
        m = lr.max(axis=1, keepdims=True)
        lse = m + np.log(np.exp(lr - m).sum(axis=1, keepdims=True))
        total_ll = float(lse.sum())
        gmm.log_likelihood_history.append(total_ll)
        resp = np.exp(lr - lse)
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-10):
            raise GMMFitError("component starved of responsibility")
        gmm.weights = nk / n
        gmm.means = (resp.T @ data) / nk[:, None]
        diff2 = (data[:, None, :] - gmm.means[None]) ** 2
        gmm.variances = (resp[:, :, None] * diff2).sum(axis=0) / nk[:, None]
        if np.any(gmm.variances < 1e-12):
            raise GMMFitError("degenerate component variance")
        if abs(total_ll - prev) < tol:
            break
        prev = total_ll
    return gmm


def fit_gmm(data, n_components, seed=0, tol=1e-8, max_iter=500, max_restarts=5):
    """EM fit of a diagonal GMM; seeded k-means++ init, deterministic.

    Degenerate fits (starved or collapsed components) trigger a re-seeded
    restart; after max_restarts failures the error propagates.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"data must be [N,L], got shape {data.shape}")
    if len(data) < n_components:
        raise ValueError(f"need at least {n_components} rows to fit {n_components} components")
    last_err = None
    for attempt in range(max_restarts):
        rng = np.random.default_rng(seed + attempt)
        try:
            return _em_once(data, n_components, rng, tol, max_iter)
        except GMMFitError as err:
            last_err = err
    raise GMMFitError(f"EM failed after {max_restarts} restarts: {last_err}")


def whole_image_norms(patch_norms_raw):
    """Whole-image score norms from per-patch norms (exact: patches tile
    the image, so the squared norms add).

    patch_norms_raw: [n_patches, L] or [N, n_patches, L] plain norms.
    Returns log1p-transformed whole-image vectors, [L] or [N, L].
    """
    arr = np.asarray(patch_norms_raw, dtype=np.float64)
    return np.log1p(np.sqrt((arr * arr).sum(axis=-2)))


def baseline_heatmap(gmm: DiagonalGMM, patch_norms_raw, grid: PatchGrid):
    """Per-patch NLL under the whole-image GMM, broadcast to pixels.

    Patch norms are rescaled by sqrt(patch area / image area) before the
    log1p transform so their magnitude matches the whole-image training
    rows.
    """
    norms = np.asarray(patch_norms_raw, dtype=np.float64)
    h, w = grid.image_hw
    scale = np.sqrt(grid.patch * grid.patch / (h * w))
    rows = np.log1p(norms * scale)
    nll = -gmm.log_prob(rows)
    return heatmap_from_patch_nll(grid, nll)
