"""Synthetic inlier images and procedural lesion injection.

Each phantom is an elliptical "head" over a flat background: smooth
low-frequency texture inside the ellipse plus two bilaterally mirrored
blobs drawn with one shared intensity per image.  The shared draw makes
distant patches statistically dependent, which is exactly the structure a
position/context-conditioned density model can exploit and a pooled one
cannot.  Lesions are bright disks (intensity times 1.5, clamped to 1)
placed inside the foreground until a target area is reached.

Interior intensities are capped at 0.98 so every lesioned pixel strictly
increases.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_INTERIOR_CAP = 0.98


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 32
    background: float = 0.05
    ellipse_axes: tuple = (13.0, 11.0)  # (col semi-axis, row semi-axis)
    tissue: float = 0.35
    texture_amplitude: float = 0.08
    n_texture_waves: int = 3
    blob_radius: float = 2.5
    blob_row: float = 13.0
    blob_col: float = 10.5
    blob_min: float = 0.45
    blob_max: float = 0.95

    def __post_init__(self):
        if not (0.0 <= self.background < 1.0):
            raise ValueError("background must lie in [0,1)")
        if self.blob_max > _INTERIOR_CAP:
            raise ValueError(f"blob_max must not exceed {_INTERIOR_CAP}")


@dataclass(frozen=True)
class LesionSpec:
    load: int = 20  # target total lesion area in pixels
    radius_min: float = 1.0
    radius_max: float = 3.0
    factor: float = 1.5

    def __post_init__(self):
        if self.load < 0:
            raise ValueError("lesion load must be >= 0")
        if not (0 < self.radius_min <= self.radius_max):
            raise ValueError("need 0 < radius_min <= radius_max")


def _ellipse_mask(size, axes):
    center = (size - 1) / 2.0
    rows, cols = np.mgrid[0:size, 0:size]
    ax_col, ax_row = axes
    return ((rows - center) / ax_row) ** 2 + ((cols - center) / ax_col) ** 2 <= 1.0


def _disk(size, row, col, radius):
    rows, cols = np.mgrid[0:size, 0:size]
    return (rows - row) ** 2 + (cols - col) ** 2 <= radius**2


def generate_inlier(config: PhantomConfig, rng):
    """One phantom: (image [size,size] in [0,1], foreground bool mask).

    Background pixels equal config.background exactly.  Both bilateral
    blobs are painted with the same per-image draw, so their mean
    intensities match by construction.  Deterministic given the rng state.
    """
    size = config.size
    fg = _ellipse_mask(size, config.ellipse_axes)
    img = np.full((size, size), config.background)

    rows, cols = np.mgrid[0:size, 0:size]
    texture = np.zeros((size, size))
    for _ in range(config.n_texture_waves):
        freq_r, freq_c = rng.uniform(0.5, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        texture += np.sin(2 * np.pi * (freq_r * rows + freq_c * cols) / size + phase)
    texture *= config.texture_amplitude / config.n_texture_waves

    interior = np.clip(config.tissue + texture, config.background + 0.01, _INTERIOR_CAP)
    img[fg] = interior[fg]

    blob_value = rng.uniform(config.blob_min, config.blob_max)
    left = _disk(size, config.blob_row, config.blob_col, config.blob_radius)
    right = _disk(size, config.blob_row, size - 1 - config.blob_col, config.blob_radius)
    if not (left & fg).sum() == left.sum() or not (right & fg).sum() == right.sum():
        raise ValueError("bilateral blobs must lie inside the foreground ellipse")
    img[left] = blob_value
    img[right] = blob_value
    return img, fg


def inject_lesions(image, fg_mask, spec: LesionSpec, rng):
    """Bright-disk lesions until the ground-truth area reaches spec.load.

    Lesioned pixels become min(1, factor * value); the returned mask marks
    exactly the modified pixels.  Disks always lie fully inside the
    foreground.  Deterministic given the rng state.
    """
    image = np.asarray(image, dtype=np.float64)
    fg = np.asarray(fg_mask, dtype=bool)
    if spec.load > int(fg.sum()):
        raise ValueError(f"lesion load {spec.load} exceeds foreground area {int(fg.sum())}")
    size = image.shape[0]
    gt = np.zeros_like(fg)
    fg_coords = np.argwhere(fg)
    attempts = 0
    while gt.sum() < spec.load:
        radius = rng.uniform(spec.radius_min, spec.radius_max)
        row, col = fg_coords[rng.integers(0, len(fg_coords))]
        disk = _disk(size, row, col, radius)
        if (disk & ~fg).any():
            attempts += 1
            if attempts > 10_000:
                raise RuntimeError("could not place lesions inside the foreground")
            continue
        gt |= disk
    lesioned = image.copy()
    lesioned[gt] = np.minimum(1.0, spec.factor * image[gt])
    return lesioned, gt


@dataclass
class DatasetBundle:
    train: np.ndarray
    train_fg: np.ndarray
    val: np.ndarray
    val_fg: np.ndarray
    test: np.ndarray
    test_fg: np.ndarray
    test_lesioned: np.ndarray
    test_gt: np.ndarray
    seeds: dict


_ROLES = {"train": 0, "val": 1, "test": 2, "lesion": 3}


def _image_rng(base_seed, role, index):
    return np.random.default_rng(np.random.SeedSequence((base_seed, _ROLES[role], index)))


def make_split(n_train, n_val, n_test, config: PhantomConfig, lesion_spec: LesionSpec, seed=0):
    """Disjointly seeded train/val/test phantoms plus lesioned test copies.

    Lesions are injected only into a copy of the test images; the clean
    copies are retained.  Per-image seeds are derived from (seed, role,
    index), so the roles never share a random stream.
    """
    if min(n_train, n_val, n_test) <= 0:
        raise ValueError("all split sizes must be positive")

    def gen(role, count):
        imgs, masks = [], []
        for i in range(count):
            img, fg = generate_inlier(config, _image_rng(seed, role, i))
            imgs.append(img)
            masks.append(fg)
        return np.stack(imgs), np.stack(masks)

    train, train_fg = gen("train", n_train)
    val, val_fg = gen("val", n_val)
    test, test_fg = gen("test", n_test)
    lesioned, gts = [], []
    for i in range(n_test):
        les, gt = inject_lesions(test[i], test_fg[i], lesion_spec, _image_rng(seed, "lesion", i))
        lesioned.append(les)
        gts.append(gt)
    seeds = {
        role: [[seed, _ROLES[role], i] for i in range(count)]
        for role, count in (("train", n_train), ("val", n_val), ("test", n_test), ("lesion", n_test))
    }
    return DatasetBundle(
        train=train, train_fg=train_fg, val=val, val_fg=val_fg,
        test=test, test_fg=test_fg, test_lesioned=np.stack(lesioned), test_gt=np.stack(gts),
        seeds=seeds,
    )
