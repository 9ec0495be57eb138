"""Estimator facade: scikit-learn-style fit/score wrappers over the pipeline.

The estimators follow the sklearn parameter protocol (constructor args
are hyperparameters, get_params/set_params support cloning, learned state
lives in trailing-underscore attributes) without depending on sklearn
itself.  `fit` consumes a stack of inlier images; `anomaly_maps` returns
per-pixel negative log-likelihood heatmaps and `score_samples` follows
the sklearn outlier convention that larger values mean more normal.
"""
from __future__ import annotations

import inspect

import numpy as np

from .baseline import baseline_heatmap, fit_gmm, whole_image_norms
from .features import ContextEncoder, PatchGrid, build_dataset, patch_score_norms
from .flow import FlowModel, train_flow
from .inference import spatial_heatmap_from_norms
from .schedule import NoiseSchedule, calibrate_sigma_max, calibrate_sigma_min
from .scorenet import ConvScoreNet, TrainConfig, train_score
from .validation import check_fitted, check_images, check_masks


class BaseEstimator:
    """Minimal sklearn-compatible parameter handling."""

    @classmethod
    def _param_names(cls):
        sig = inspect.signature(cls.__init__)
        return [p.name for p in sig.parameters.values() if p.name != "self"]

    def get_params(self, deep=True):
        return {name: getattr(self, name) for name in self._param_names()}

    def set_params(self, **params):
        valid = set(self._param_names())
        for key, value in params.items():
            if key not in valid:
                raise ValueError(f"invalid parameter {key!r} for {type(self).__name__}")
            setattr(self, key, value)
        return self

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.get_params().items())
        return f"{type(self).__name__}({args})"


class _ScoreBackbone:
    """Shared trained pieces: schedule, score net, patch grid."""

    def __init__(self, schedule, score_model, grid):
        self.schedule = schedule
        self.score_model = score_model
        self.grid = grid

    def patch_norms(self, image):
        return patch_score_norms(self.score_model, image, self.schedule, self.grid)


def _fit_backbone(X, masks, *, patch_size, n_scales, sigma_min, sigma_max, calib_subsample,
                  score_channels, score_iterations, score_batch, score_lr, batch_doubling, seed):
    h, w = X.shape[1:]
    lo = sigma_min if sigma_min else calibrate_sigma_min(X, masks)
    hi = sigma_max if sigma_max else calibrate_sigma_max(X, min(calib_subsample, len(X)), seed=seed)
    schedule = NoiseSchedule(lo, hi, n_scales)
    model = ConvScoreNet((h, w), schedule, channels=tuple(score_channels), seed=seed)
    cfg = TrainConfig(iterations=score_iterations, batch_size=score_batch, lr=score_lr,
                      seed=seed, batch_doubling=batch_doubling)
    train_score(X, cfg, schedule, model=model)
    return _ScoreBackbone(schedule, model, PatchGrid((h, w), patch_size))


class SpatialAnomalyDetector(BaseEstimator):
    """Patch-wise anomaly localizer: score norms + conditional flow.

    fit() trains the noise-conditioned score network on inlier images,
    featurizes them into per-patch multiscale score norms, and fits a
    conditional normalizing flow (jointly with the context encoder) on
    those rows.  anomaly_maps() returns per-pixel NLL heatmaps.
    """

    def __init__(self, patch_size=8, n_scales=10, sigma_min=None, sigma_max=None,
                 calib_subsample=64, pos_dim=16, ctx_dim=32, score_channels=(8, 16, 32),
                 score_iterations=3000, score_batch=16, score_lr=1e-3, batch_doubling=True,
                 flow_blocks=6, flow_hidden=64, gmm_components=5, flow_iterations=2000,
                 flow_batch_images=8, flow_lr=3e-3, use_positional=True, seed=0):
        self.patch_size = patch_size
        self.n_scales = n_scales
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.calib_subsample = calib_subsample
        self.pos_dim = pos_dim
        self.ctx_dim = ctx_dim
        self.score_channels = score_channels
        self.score_iterations = score_iterations
        self.score_batch = score_batch
        self.score_lr = score_lr
        self.batch_doubling = batch_doubling
        self.flow_blocks = flow_blocks
        self.flow_hidden = flow_hidden
        self.gmm_components = gmm_components
        self.flow_iterations = flow_iterations
        self.flow_batch_images = flow_batch_images
        self.flow_lr = flow_lr
        self.use_positional = use_positional
        self.seed = seed

    def fit(self, X, y=None, foreground=None):
        X = check_images(X)
        masks = check_masks(foreground, X)
        self.backbone_ = _fit_backbone(
            X, masks, patch_size=self.patch_size, n_scales=self.n_scales,
            sigma_min=self.sigma_min, sigma_max=self.sigma_max, calib_subsample=self.calib_subsample,
            score_channels=self.score_channels, score_iterations=self.score_iterations,
            score_batch=self.score_batch, score_lr=self.score_lr,
            batch_doubling=self.batch_doubling, seed=self.seed,
        )
        encoder = ContextEncoder(X.shape[1:], d_ctx=self.ctx_dim, seed=self.seed + 1)
        dataset = build_dataset(self.backbone_.score_model, X, self.backbone_.schedule,
                                self.backbone_.grid, encoder, d_pos=self.pos_dim)
        self.flow_ = FlowModel(self.n_scales, self.pos_dim + self.ctx_dim, n_blocks=self.flow_blocks,
                               hidden=self.flow_hidden, n_components=self.gmm_components,
                               encoder=encoder, seed=self.seed + 2)
        train_flow(dataset, self.flow_, TrainConfig(iterations=self.flow_iterations, lr=self.flow_lr,
                                                    seed=self.seed + 3),
                   batch_images=self.flow_batch_images, use_positional=self.use_positional)
        self.train_dataset_ = dataset
        return self

    def anomaly_maps(self, X):
        """Per-pixel NLL heatmaps, [n_samples, H, W]."""
        check_fitted(self, "flow_")
        X = check_images(X)
        maps = []
        for img in X:
            raw = self.backbone_.patch_norms(img)
            hm = spatial_heatmap_from_norms(self.flow_, self.flow_.encoder, self.backbone_.grid,
                                            raw, img, d_pos=self.pos_dim)
            maps.append(hm.values)
        return np.stack(maps)

    def score_samples(self, X):
        """Mean patch log-likelihood per image (higher = more normal)."""
        return -self.anomaly_maps(X).mean(axis=(1, 2))


class ScoreNormGMMBaseline(BaseEstimator):
    """Non-spatial baseline: GMM over whole-image score norms.

    Reuses a fitted SpatialAnomalyDetector's backbone when given one, so
    both methods consume identical score tensors; otherwise trains its own
    backbone with the same hyperparameters.
    """

    def __init__(self, n_components=3, backbone=None, patch_size=8, n_scales=10,
                 sigma_min=None, sigma_max=None, calib_subsample=64, score_channels=(8, 16, 32),
                 score_iterations=3000, score_batch=16, score_lr=1e-3, batch_doubling=True, seed=0):
        self.n_components = n_components
        self.backbone = backbone
        self.patch_size = patch_size
        self.n_scales = n_scales
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        self.calib_subsample = calib_subsample
        self.score_channels = score_channels
        self.score_iterations = score_iterations
        self.score_batch = score_batch
        self.score_lr = score_lr
        self.batch_doubling = batch_doubling
        self.seed = seed

    def _resolve_backbone(self, X, masks):
        if isinstance(self.backbone, SpatialAnomalyDetector):
            check_fitted(self.backbone, "backbone_")
            return self.backbone.backbone_
        if isinstance(self.backbone, _ScoreBackbone):
            return self.backbone
        return _fit_backbone(
            X, masks, patch_size=self.patch_size, n_scales=self.n_scales,
            sigma_min=self.sigma_min, sigma_max=self.sigma_max, calib_subsample=self.calib_subsample,
            score_channels=self.score_channels, score_iterations=self.score_iterations,
            score_batch=self.score_batch, score_lr=self.score_lr,
            batch_doubling=self.batch_doubling, seed=self.seed,
        )

    def fit(self, X, y=None, foreground=None):
        X = check_images(X)
        masks = check_masks(foreground, X)
        self.backbone_ = self._resolve_backbone(X, masks)
        raw = np.stack([self.backbone_.patch_norms(img) for img in X])
        self.gmm_ = fit_gmm(whole_image_norms(raw), self.n_components, seed=self.seed + 4)
        return self

    def anomaly_maps(self, X):
        check_fitted(self, "gmm_")
        X = check_images(X)
        maps = []
        for img in X:
            raw = self.backbone_.patch_norms(img)
            maps.append(baseline_heatmap(self.gmm_, raw, self.backbone_.grid).values)
        return np.stack(maps)

    def score_samples(self, X):
        check_fitted(self, "gmm_")
        X = check_images(X)
        raw = np.stack([self.backbone_.patch_norms(img) for img in X])
        return self.gmm_.log_prob(whole_image_norms(raw))
