"""sms: score-matching segmenter.

Unsupervised anomaly localization for images: a noise-conditioned score
network turns an image into per-patch multiscale score-norm vectors, a
conditional normalizing flow (conditioned on patch position and global
image context) scores their likelihood, and per-patch negative
log-likelihood heatmaps localize anomalies.  Includes a non-spatial
whole-image GMM baseline, exact segmentation metrics, and a synthetic
phantom/lesion benchmark driven by the `sms` CLI.
"""

from .baseline import DiagonalGMM, baseline_heatmap, fit_gmm, whole_image_norms
from .estimators import ScoreNormGMMBaseline, SpatialAnomalyDetector
from .features import ContextEncoder, FeatureDataset, PatchGrid, build_dataset, patch_score_norms, positional_encoding
from .flow import ConditionalGMM, CouplingBlock, FlowModel, flow_forward, flow_inverse, gmm_log_prob, log_likelihood, train_flow
from .inference import Heatmap, anomaly_heatmap, apply_mask, evaluate_sample, postprocess, threshold_search
from .metrics import component_confusion, hausdorff_percentile, mean_surface_distance, symmetric_msd
from .phantom import DatasetBundle, LesionSpec, PhantomConfig, generate_inlier, inject_lesions, make_split
from .schedule import NoiseSchedule, calibrate_sigma_max, calibrate_sigma_min
from .scorenet import (
    ConvScoreNet,
    MLPScoreNet,
    TrainConfig,
    analytic_gaussian_score,
    dsm_multiscale_loss,
    estimate_score,
    implicit_sm_loss,
    parzen_score,
    perturb,
    train_score,
)

__version__ = "0.1.0"

__all__ = [
    "ConditionalGMM",
    "ContextEncoder",
    "ConvScoreNet",
    "CouplingBlock",
    "DatasetBundle",
    "DiagonalGMM",
    "FeatureDataset",
    "FlowModel",
    "Heatmap",
    "LesionSpec",
    "MLPScoreNet",
    "NoiseSchedule",
    "PatchGrid",
    "PhantomConfig",
    "ScoreNormGMMBaseline",
    "SpatialAnomalyDetector",
    "TrainConfig",
    "analytic_gaussian_score",
    "anomaly_heatmap",
    "apply_mask",
    "baseline_heatmap",
    "build_dataset",
    "calibrate_sigma_max",
    "calibrate_sigma_min",
    "component_confusion",
    "dsm_multiscale_loss",
    "estimate_score",
    "evaluate_sample",
    "fit_gmm",
    "flow_forward",
    "flow_inverse",
    "generate_inlier",
    "gmm_log_prob",
    "hausdorff_percentile",
    "implicit_sm_loss",
    "inject_lesions",
    "log_likelihood",
    "make_split",
    "mean_surface_distance",
    "parzen_score",
    "patch_score_norms",
    "perturb",
    "positional_encoding",
    "postprocess",
    "symmetric_msd",
    "threshold_search",
    "train_flow",
    "train_score",
    "whole_image_norms",
]
