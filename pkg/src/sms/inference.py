"""Anomaly heatmaps and the per-sample segmentation procedure.

A heatmap holds one negative log-likelihood per patch, broadcast to that
patch's pixels.  Inference masks the heatmap to the foreground (-inf
sentinel outside), then searches thresholds at the midpoints of the
sorted unique values: each candidate segmentation is post-processed
(drop 4-connected components smaller than 3 pixels, dilate by the
radius-1 cross, re-intersect with the foreground) and scored by its
symmetric mean surface distance against the ground truth.  Ties break
toward the higher threshold, i.e. fewer positives.  Midpoint enumeration
is exact for piecewise-constant heatmaps, and the same procedure is
applied to every method under comparison.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .features import PatchGrid, grid_positional_encodings, patch_score_norms
from .flow import FlowModel, log_likelihood
from .metrics import component_confusion, hausdorff_percentile, label_components, mean_surface_distance, symmetric_msd


@dataclass
class Heatmap:
    """Per-pixel anomaly scores, constant within each patch cell."""

    values: np.ndarray  # [H,W]
    patch_nll: np.ndarray  # [n_patches] provenance
    grid: PatchGrid


def heatmap_from_patch_nll(grid: PatchGrid, patch_nll):
    nll = np.asarray(patch_nll, dtype=np.float64)
    cells = nll.reshape(grid.n_rows, grid.n_cols)
    values = np.kron(cells, np.ones((grid.patch, grid.patch)))
    return Heatmap(values=values, patch_nll=nll, grid=grid)


def spatial_heatmap_from_norms(flow: FlowModel, encoder, grid: PatchGrid, raw_norms, x, d_pos=16):
    """Conditional-flow NLL heatmap given precomputed raw patch norms.

    Respects the flow's training-time choice about positional
    conditioning (the ablation zeroes that block).
    """
    x = np.asarray(x, dtype=np.float64)
    norms = np.log1p(np.asarray(raw_norms, dtype=np.float64))
    pos = grid_positional_encodings(grid, d_pos)
    if not flow.uses_positional:
        pos = np.zeros_like(pos)
    with ad.no_grad():
        ctx_img = encoder.forward(x[None]).data[0]
    ctx = np.concatenate([pos, np.tile(ctx_img, (grid.n_patches, 1))], axis=1)
    nll = -log_likelihood(flow, norms, ctx)
    return heatmap_from_patch_nll(grid, nll)


def anomaly_heatmap(flow: FlowModel, score_model, schedule, grid: PatchGrid, encoder, x, d_pos=16):
    """Patch NLL heatmap of one image under the conditional flow."""
    raw = patch_score_norms(score_model, np.asarray(x, dtype=np.float64), schedule, grid)
    return spatial_heatmap_from_norms(flow, encoder, grid, raw, x, d_pos=d_pos)


def apply_mask(heatmap: Heatmap, fg_mask):
    """Set scores outside the foreground to -inf so they are never selected."""
    fg = np.asarray(fg_mask, dtype=bool)
    if fg.shape != heatmap.values.shape:
        raise ValueError(f"mask shape {fg.shape} != heatmap shape {heatmap.values.shape}")
    values = np.where(fg, heatmap.values, -np.inf)
    return Heatmap(values=values, patch_nll=heatmap.patch_nll, grid=heatmap.grid)


def dilate_cross(mask):
    """Morphological dilation with the radius-1 disk (4-neighborhood cross)."""
    m = np.asarray(mask, dtype=bool)
    out = m.copy()
    out[1:, :] |= m[:-1, :]
    out[:-1, :] |= m[1:, :]
    out[:, 1:] |= m[:, :-1]
    out[:, :-1] |= m[:, 1:]
    return out


def postprocess(segmentation, min_size=3):
    """Drop 4-connected components smaller than min_size, then dilate.

    Not idempotent: the dilation grows surviving components each call.
    """
    seg = np.asarray(segmentation, dtype=bool)
    labels, count = label_components(seg, connectivity=4)
    if count:
        sizes = np.bincount(labels.ravel(), minlength=count + 1)
        keep = sizes >= min_size
        keep[0] = False
        seg = keep[labels]
    else:
        seg = np.zeros_like(seg)
    return dilate_cross(seg)


def _candidate_thresholds(values):
    finite = np.unique(values[np.isfinite(values)])
    mids = (finite[:-1] + finite[1:]) / 2.0 if finite.size > 1 else np.empty(0)
    return np.concatenate(([-np.inf], mids, [np.inf]))


def segment_at(heatmap_values, threshold):
    """Raw thresholded segmentation; masked (-inf) pixels never turn on."""
    v = np.asarray(heatmap_values, dtype=np.float64)
    return (v >= threshold) & np.isfinite(v)


def threshold_search(heatmap, gt_mask):
    """(best threshold, post-processed segmentation) minimizing symmetric MSD.

    Evaluates every midpoint of the sorted unique heatmap values plus the
    two infinite sentinels; ties break toward the higher threshold.  The
    candidate segmentations are post-processed and re-intersected with the
    foreground (finite region) before scoring.
    """
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap, dtype=np.float64)
    gt = np.asarray(gt_mask, dtype=bool)
    if not gt.any():
        raise ValueError("threshold_search needs a non-empty ground-truth mask")
    if gt.shape != values.shape:
        raise ValueError(f"gt shape {gt.shape} != heatmap shape {values.shape}")
    fg = np.isfinite(values)
    best = None
    for thr in _candidate_thresholds(values):
        seg = postprocess(segment_at(values, thr)) & fg
        score = symmetric_msd(gt, seg)
        if best is None or score <= best[0]:
            best = (score, thr, seg)
    _, thr, seg = best
    return thr, seg


def evaluate_sample(heatmap, fg_mask, gt_mask):
    """Threshold search plus the full metric row for one test sample."""
    masked = apply_mask(heatmap, fg_mask) if isinstance(heatmap, Heatmap) else heatmap
    thr, seg = threshold_search(masked, gt_mask)
    conf = component_confusion(gt_mask, seg)
    return {
        "threshold": float(thr),
        "segmentation": seg,
        "hd99": hausdorff_percentile(gt_mask, seg),
        "msd": mean_surface_distance(gt_mask, seg),
        "tp": conf.tp,
        "fp": conf.fp,
        "fn": conf.fn,
        "tpr": conf.tpr,
        "ppv": conf.ppv,
    }


def render_heatmap_pgm(values, fg_mask=None, clip_q=90.0):
    """8-bit rendering clipped at the per-sample upper percentile.

    Masked / non-finite pixels are drawn (and persisted) at the heatmap
    minimum.
    """
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    if fg_mask is not None:
        finite &= np.asarray(fg_mask, dtype=bool)
    if not finite.any():
        return np.zeros(v.shape, dtype=np.uint8)
    vals = v[finite]
    lo = vals.min()
    hi = float(np.percentile(vals, clip_q, method="linear"))
    if hi <= lo:
        hi = lo + 1.0
    filled = np.where(finite, np.clip(v, lo, hi), lo)
    return np.rint((filled - lo) / (hi - lo) * 255).astype(np.uint8)


def heatmap_for_storage(values):
    """Replace the -inf sentinel by the finite minimum for persistence."""
    v = np.asarray(values, dtype=np.float64)
    finite = np.isfinite(v)
    if not finite.any():
        return np.zeros_like(v)
    return np.where(finite, v, v[finite].min())
