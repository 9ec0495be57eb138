"""Segmentation metrics: percentile Hausdorff, surface distances, and
component-wise TPR/PPV.

Surfaces are foreground pixels with at least one 4-neighbor background
pixel, the image border counting as background.  Distance metrics are
directed from the ground truth to the prediction unless stated otherwise
and are reported in pixel units.  When either mask is empty the distance
metrics return a worst-case sentinel equal to the image diagonal, so
threshold searches never spuriously prefer empty predictions.

Connected components for the confusion counts use the 8-neighborhood
(diagonals included); a predicted component counts as a true positive if
it overlaps any ground-truth pixel at all.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def _as_mask(name, mask):
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-d mask, got shape {arr.shape}")
    return arr.astype(bool)


def surface_points(mask):
    """[K,2] coordinates of foreground pixels touching background (4-adjacency)."""
    m = _as_mask("mask", mask)
    pad = np.pad(m, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return np.argwhere(m & ~interior)


def directed_distances(a_points, b_points):
    """For each point of `a`, Euclidean distance to the nearest point of `b`."""
    a = np.asarray(a_points, dtype=np.float64)
    b = np.asarray(b_points, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise ValueError("directed_distances requires non-empty point sets")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    return np.sqrt(d2.min(axis=1))


def _diagonal_sentinel(shape):
    return float(np.hypot(shape[0], shape[1]))


def hausdorff_percentile(gt_mask, pred_mask, q=99.0):
    """q-th percentile (linear interpolation) of gt->pred surface distances."""
    gt = _as_mask("gt", gt_mask)
    pred = _as_mask("pred", pred_mask)
    if not gt.any() or not pred.any():
        return _diagonal_sentinel(gt.shape)
    d = directed_distances(surface_points(gt), surface_points(pred))
    return float(np.percentile(d, q, method="linear"))


def mean_surface_distance(gt_mask, pred_mask):
    """Mean of directed gt->pred surface distances."""
    gt = _as_mask("gt", gt_mask)
    pred = _as_mask("pred", pred_mask)
    if not gt.any() or not pred.any():
        return _diagonal_sentinel(gt.shape)
    return float(directed_distances(surface_points(gt), surface_points(pred)).mean())


def symmetric_msd(a_mask, b_mask):
    """Average of the two directed mean surface distances."""
    return 0.5 * (mean_surface_distance(a_mask, b_mask) + mean_surface_distance(b_mask, a_mask))


def label_components(mask, connectivity=8):
    """(labels [H,W] int, count); labels are 1..count in scan order.

    Two-pass union-find; connectivity 4 or 8 (8 includes diagonals).
    """
    m = _as_mask("mask", mask)
    if connectivity not in (4, 8):
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    h, w = m.shape
    labels = np.zeros((h, w), dtype=np.int64)
    parent = [0]

    def find(x):
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    next_label = 1
    for i in range(h):
        for j in range(w):
            if not m[i, j]:
                continue
            neighbors = []
            if i > 0 and m[i - 1, j]:
                neighbors.append(labels[i - 1, j])
            if j > 0 and m[i, j - 1]:
                neighbors.append(labels[i, j - 1])
            if connectivity == 8 and i > 0:
                if j > 0 and m[i - 1, j - 1]:
                    neighbors.append(labels[i - 1, j - 1])
                if j < w - 1 and m[i - 1, j + 1]:
                    neighbors.append(labels[i - 1, j + 1])
            if not neighbors:
                labels[i, j] = next_label
                parent.append(next_label)
                next_label += 1
            else:
                roots = [find(int(n)) for n in neighbors]
                keep = min(roots)
                labels[i, j] = keep
                for r in roots:
                    if r != keep:
                        parent[r] = keep
    remap = {}
    count = 0
    for i in range(h):
        for j in range(w):
            if labels[i, j]:
                root = find(int(labels[i, j]))
                if root not in remap:
                    count += 1
                    remap[root] = count
                labels[i, j] = remap[root]
    return labels, count


@dataclass(frozen=True)
class ComponentConfusion:
    tp: int
    fp: int
    fn: int
    tpr: float
    ppv: float


def component_confusion(gt_mask, pred_mask):
    """Component-wise counts with overlap-at-any-pixel matching.

    TP: predicted components touching any ground-truth pixel; FP: the
    rest of the predicted components; FN: ground-truth components with no
    predicted overlap.  TPR = TP/(TP+FN), PPV = TP/(TP+FP); the empty-side
    conventions are TPR=1 with no ground-truth components and PPV=1 with
    no predicted components.
    """
    gt = _as_mask("gt", gt_mask)
    pred = _as_mask("pred", pred_mask)
    if gt.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {gt.shape} vs {pred.shape}")
    pred_labels, n_pred = label_components(pred, connectivity=8)
    gt_labels, n_gt = label_components(gt, connectivity=8)
    hit_pred = set(np.unique(pred_labels[gt & (pred_labels > 0)]).tolist())
    hit_gt = set(np.unique(gt_labels[pred & (gt_labels > 0)]).tolist())
    tp = len(hit_pred)
    fp = n_pred - tp
    fn = n_gt - len(hit_gt)
    tpr = 1.0 if n_gt == 0 else tp / (tp + fn)
    ppv = 1.0 if n_pred == 0 else tp / (tp + fp)
    return ComponentConfusion(tp=tp, fp=fp, fn=fn, tpr=tpr, ppv=ppv)
