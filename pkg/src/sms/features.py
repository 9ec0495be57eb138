"""Patch-wise score-norm features and their conditioning vectors.

An image is tiled by a non-overlapping patch grid.  For each evaluation
sigma the full-image score is computed once and sliced per patch; the L2
norm over each patch's pixels gives an L-vector per patch, stored after a
log1p transform (raw norms span orders of magnitude across sigmas).  The
conditioning vector concatenates a fixed sinusoidal encoding of the patch
position with a learned global feature vector h(x) from a small
convolutional encoder that trains jointly with the flow.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .scorenet import estimate_score


@dataclass(frozen=True)
class PatchGrid:
    """Non-overlapping tiling of an (H, W) image by P x P patches."""

    image_hw: tuple
    patch: int

    def __post_init__(self):
        h, w = self.image_hw
        if h % self.patch or w % self.patch:
            raise ValueError(f"patch size {self.patch} must divide image dims {self.image_hw}")

    @property
    def n_rows(self):
        return self.image_hw[0] // self.patch

    @property
    def n_cols(self):
        return self.image_hw[1] // self.patch

    @property
    def n_patches(self):
        return self.n_rows * self.n_cols

    def position(self, index):
        """Patch index (row-major) -> (row, col) grid coordinates."""
        return divmod(int(index), self.n_cols)

    def slices(self, index):
        r, c = self.position(index)
        p = self.patch
        return slice(r * p, (r + 1) * p), slice(c * p, (c + 1) * p)


def patchify(grid: PatchGrid, tensor):
    """Row-major list of patch views; concatenation reconstructs the input."""
    arr = np.asarray(tensor)
    if arr.shape[-2:] != tuple(grid.image_hw):
        raise ValueError(f"tensor spatial dims {arr.shape[-2:]} do not match grid {grid.image_hw}")
    return [arr[(..., *grid.slices(i))] for i in range(grid.n_patches)]


def patch_norms_from_scores(grid: PatchGrid, scores):
    """scores: [L,H,W] stacked per-sigma score tensors -> [n_patches, L] norms."""
    scores = np.asarray(scores, dtype=np.float64)
    ell, h, w = scores.shape
    p = grid.patch
    blocks = scores.reshape(ell, grid.n_rows, p, grid.n_cols, p)
    blocks = blocks.transpose(1, 3, 0, 2, 4).reshape(grid.n_patches, ell, p * p)
    return np.sqrt((blocks * blocks).sum(axis=2))


def patch_score_norms(model, x, schedule, grid: PatchGrid):
    """Full-image scores at every eval sigma, then per-patch plain L2 norms."""
    scores = np.stack([estimate_score(model, x, float(s)) for s in schedule.eval_sigmas()])
    return patch_norms_from_scores(grid, scores)


def positional_encoding(row, col, d_pos):
    """Sinusoidal encoding of a grid position; half the dims per axis.

    For each axis value q and frequency index k the entries are
    sin(q / 10000^(2k/D_half)), cos(q / 10000^(2k/D_half)).
    """
    if d_pos % 4:
        raise ValueError(f"d_pos must be divisible by 4, got {d_pos}")
    half = d_pos // 2
    out = np.empty(d_pos)
    for offset, q in ((0, row), (half, col)):
        for k in range(half // 2):
            angle = q / 10000.0 ** (2.0 * k / half)
            out[offset + 2 * k] = np.sin(angle)
            out[offset + 2 * k + 1] = np.cos(angle)
    return out


def grid_positional_encodings(grid: PatchGrid, d_pos):
    return np.stack([positional_encoding(*grid.position(i), d_pos) for i in range(grid.n_patches)])


class ContextEncoder:
    """Conv net mapping an [H,W] image to a global feature vector.

    Three stride-2 convolutions give a receptive field spanning most of
    the image; global average pooling plus a linear head produce the
    context vector.  Trainable: the flow's backward pass updates it.
    """

    def __init__(self, image_hw, d_ctx=32, channels=(8, 16, 32), seed=0):
        h, w = image_hw
        if h % 8 or w % 8:
            raise ValueError(f"image dims must be divisible by 8, got {image_hw}")
        self.image_hw = (int(h), int(w))
        self.d_ctx = int(d_ctx)
        self.channels = tuple(int(c) for c in channels)
        c1, c2, c3 = self.channels
        rng = np.random.default_rng(seed)
        self.params = {
            "conv1.w": ad.Tensor(rng.standard_normal((c1, 1, 3, 3)) * np.sqrt(2.0 / 9), requires_grad=True),
            "conv1.b": ad.Tensor(np.zeros(c1), requires_grad=True),
            "conv2.w": ad.Tensor(rng.standard_normal((c2, c1, 3, 3)) * np.sqrt(2.0 / (c1 * 9)), requires_grad=True),
            "conv2.b": ad.Tensor(np.zeros(c2), requires_grad=True),
            "conv3.w": ad.Tensor(rng.standard_normal((c3, c2, 3, 3)) * np.sqrt(2.0 / (c2 * 9)), requires_grad=True),
            "conv3.b": ad.Tensor(np.zeros(c3), requires_grad=True),
            "head.w": ad.Tensor(rng.standard_normal((c3, self.d_ctx)) / np.sqrt(c3), requires_grad=True),
            "head.b": ad.Tensor(np.zeros(self.d_ctx), requires_grad=True),
        }

    def forward(self, images):
        """images: [B,H,W] -> Tensor [B, d_ctx]."""
        x = np.asarray(images, dtype=np.float64)
        if x.shape[-2:] != self.image_hw:
            raise ad.ShapeError(f"encoder built for {self.image_hw}, got {x.shape[-2:]}")
        p = self.params

        def bias(name):
            return ad.reshape(p[name], (1, -1, 1, 1))

        h = ad.Tensor(x[:, None])
        h = ad.relu(ad.conv2d(h, p["conv1.w"], stride=2, padding=1) + bias("conv1.b"))
        h = ad.relu(ad.conv2d(h, p["conv2.w"], stride=2, padding=1) + bias("conv2.b"))
        h = ad.relu(ad.conv2d(h, p["conv3.w"], stride=2, padding=1) + bias("conv3.b"))
        pooled = ad.mean(h, axis=(2, 3))
        return ad.matmul(pooled, p["head.w"]) + p["head.b"]

    def to_arrays(self):
        return {k: t.data for k, t in self.params.items()}

    def meta(self):
        return {"image_hw": list(self.image_hw), "d_ctx": self.d_ctx, "channels": list(self.channels)}

    @classmethod
    def from_arrays(cls, arrays, meta):
        enc = cls(tuple(meta["image_hw"]), d_ctx=meta["d_ctx"], channels=tuple(meta["channels"]))
        enc.params = {k: ad.Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return enc


def encode_context(encoder: ContextEncoder, x):
    """Frozen-encoder context vector for a single [H,W] image."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != encoder.image_hw:
        raise ad.ShapeError(f"expected image of shape {encoder.image_hw}, got {x.shape}")
    with ad.no_grad():
        return encoder.forward(x[None]).data[0]


@dataclass
class FeatureDataset:
    """One row per (image, patch): transformed norms plus conditioning parts.

    The positional block is fixed; the global context block depends on the
    encoder, so rows keep a reference to their source images and the
    context is materialized on demand (training recomputes it every step
    so encoder gradients flow).
    """

    norms: np.ndarray  # [rows, L], log1p of plain patch norms
    pos: np.ndarray  # [rows, d_pos]
    sample_ids: np.ndarray  # [rows]
    patch_ids: np.ndarray  # [rows]
    images: np.ndarray  # [n_images, H, W]
    grid: PatchGrid
    d_ctx: int = 32
    extra: dict = field(default_factory=dict)

    @property
    def n_rows(self):
        return self.norms.shape[0]

    @property
    def n_images(self):
        return self.images.shape[0]

    @property
    def patches_per_image(self):
        return self.grid.n_patches

    def rows_for_images(self, image_idx):
        g = self.patches_per_image
        return np.concatenate([np.arange(i * g, (i + 1) * g) for i in np.asarray(image_idx, dtype=int)])

    def materialize(self, encoder: ContextEncoder):
        """Full [rows, L + d_pos + d_ctx + 2] matrix with a frozen encoder."""
        with ad.no_grad():
            ctx = encoder.forward(self.images).data
        ctx_rows = np.repeat(ctx, self.patches_per_image, axis=0)
        ids = np.stack([self.sample_ids.astype(np.float64), self.patch_ids.astype(np.float64)], axis=1)
        return np.concatenate([self.norms, self.pos, ctx_rows, ids], axis=1)

    def column_layout(self):
        ell = self.norms.shape[1]
        d_pos = self.pos.shape[1]
        return {
            "norms": [0, ell],
            "positional": [ell, ell + d_pos],
            "context": [ell + d_pos, ell + d_pos + self.d_ctx],
            "sample_id": ell + d_pos + self.d_ctx,
            "patch_id": ell + d_pos + self.d_ctx + 1,
        }


def build_dataset(model, images, schedule, grid: PatchGrid, encoder: ContextEncoder, d_pos=16):
    """Featurize a stack of images into (norm, conditioning) rows.

    Row order is deterministic: image-major, patches row-major.  Norms are
    log1p-transformed; positional encodings are computed once per grid
    cell and repeated.
    """
    images = np.asarray(images, dtype=np.float64)
    pos_block = grid_positional_encodings(grid, d_pos)
    raw = []
    for img in images:
        raw.append(patch_score_norms(model, img, schedule, grid))
    g = grid.n_patches
    n = images.shape[0]
    raw_norms = np.stack(raw) if n else np.zeros((0, g, schedule.n_scales))
    return FeatureDataset(
        norms=np.log1p(raw_norms.reshape(n * g, -1)),
        pos=np.tile(pos_block, (n, 1)),
        sample_ids=np.repeat(np.arange(n), g),
        patch_ids=np.tile(np.arange(g), n),
        images=images,
        grid=grid,
        d_ctx=encoder.d_ctx,
        extra={"raw_norms": raw_norms},  # [n, G, L]; the baseline consumes these
    )
