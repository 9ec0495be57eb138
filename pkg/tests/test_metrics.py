"""Metric tests against brute-force oracles."""
import numpy as np
import pytest
from oracles import oracle_confusion, oracle_directed, oracle_flood_labels, oracle_surface, random_mask

from sms.metrics import (
    component_confusion,
    directed_distances,
    hausdorff_percentile,
    label_components,
    mean_surface_distance,
    surface_points,
    symmetric_msd,
)


# -- distances ------------------------------------------------------------------


def test_directed_distances_identical_sets():
    pts = np.array([[1, 1], [2, 3]])
    np.testing.assert_array_equal(directed_distances(pts, pts), [0.0, 0.0])


def test_directed_distances_three_four_five():
    assert directed_distances(np.array([[0, 0]]), np.array([[3, 4]]))[0] == pytest.approx(5.0)


def test_directed_distances_empty_rejected():
    with pytest.raises(ValueError):
        directed_distances(np.zeros((0, 2)), np.array([[0, 0]]))


def test_directed_distances_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = random_mask(rng)
        b = random_mask(rng)
        sa, sb = surface_points(a), surface_points(b)
        got = directed_distances(sa, sb)
        expected = oracle_directed([tuple(p) for p in sa], [tuple(p) for p in sb])
        np.testing.assert_allclose(got, expected, rtol=1e-12)


def test_surface_matches_brute_force():
    rng = np.random.default_rng(1)
    for _ in range(20):
        m = random_mask(rng)
        got = sorted(map(tuple, surface_points(m)))
        assert got == sorted(oracle_surface(m))


def test_hausdorff_identical_masks_zero():
    m = np.zeros((8, 8), dtype=bool)
    m[2:5, 3:6] = True
    assert hausdorff_percentile(m, m) == 0.0


def test_hausdorff_q100_is_max():
    rng = np.random.default_rng(2)
    a, b = random_mask(rng), random_mask(rng)
    d = directed_distances(surface_points(a), surface_points(b))
    assert hausdorff_percentile(a, b, q=100) == pytest.approx(d.max())


def test_hausdorff_matches_sorted_percentile_oracle():
    rng = np.random.default_rng(3)
    for _ in range(20):
        a, b = random_mask(rng), random_mask(rng)
        d = sorted(oracle_directed([tuple(p) for p in surface_points(a)], [tuple(p) for p in surface_points(b)]))
        assert hausdorff_percentile(a, b, 99) == pytest.approx(np.percentile(d, 99, method="linear"), rel=1e-12)


def test_hausdorff_monotone_in_q():
    rng = np.random.default_rng(4)
    a, b = random_mask(rng), random_mask(rng)
    values = [hausdorff_percentile(a, b, q) for q in (10, 50, 90, 99, 100)]
    assert all(x <= y + 1e-12 for x, y in zip(values, values[1:]))


def test_msd_single_pixels():
    gt = np.zeros((4, 4), dtype=bool)
    pred = np.zeros((4, 4), dtype=bool)
    gt[0, 0] = True
    pred[0, 2] = True
    assert mean_surface_distance(gt, pred) == pytest.approx(2.0)


def test_msd_matches_brute_force_and_bounded_by_max():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a, b = random_mask(rng), random_mask(rng)
        d = oracle_directed([tuple(p) for p in surface_points(a)], [tuple(p) for p in surface_points(b)])
        assert mean_surface_distance(a, b) == pytest.approx(np.mean(d), rel=1e-12)
        assert mean_surface_distance(a, b) <= hausdorff_percentile(a, b, 100) + 1e-12


def test_symmetric_msd_is_symmetric():
    rng = np.random.default_rng(6)
    a, b = random_mask(rng), random_mask(rng)
    assert symmetric_msd(a, b) == pytest.approx(symmetric_msd(b, a), rel=1e-12)
    assert symmetric_msd(a, a) == 0.0


def test_symmetric_msd_two_component_case():
    gt = np.zeros((10, 10), dtype=bool)
    pred = np.zeros((10, 10), dtype=bool)
    gt[1, 1] = True
    gt[8, 8] = True
    pred[1, 2] = True
    pred[8, 6] = True
    ab = np.mean(oracle_directed([(1, 1), (8, 8)], [(1, 2), (8, 6)]))
    ba = np.mean(oracle_directed([(1, 2), (8, 6)], [(1, 1), (8, 8)]))
    assert symmetric_msd(gt, pred) == pytest.approx(0.5 * (ab + ba), rel=1e-12)


def test_empty_mask_sentinel_is_image_diagonal():
    gt = np.zeros((16, 16), dtype=bool)
    pred = np.zeros((16, 16), dtype=bool)
    pred[3, 3] = True
    sentinel = np.hypot(16, 16)
    assert hausdorff_percentile(gt, pred) == pytest.approx(sentinel)
    assert mean_surface_distance(pred, gt) == pytest.approx(sentinel)
    assert symmetric_msd(gt, pred) == pytest.approx(sentinel)


def test_translation_invariance():
    rng = np.random.default_rng(7)
    a = np.zeros((16, 16), dtype=bool)
    b = np.zeros((16, 16), dtype=bool)
    a[4:7, 4:8] = rng.random((3, 4)) < 0.7
    b[5:9, 3:7] = rng.random((4, 4)) < 0.7
    a[5, 5] = b[6, 5] = True
    shifted_a = np.roll(np.roll(a, 3, axis=0), 2, axis=1)
    shifted_b = np.roll(np.roll(b, 3, axis=0), 2, axis=1)
    assert hausdorff_percentile(a, b) == pytest.approx(hausdorff_percentile(shifted_a, shifted_b), rel=1e-12)
    assert mean_surface_distance(a, b) == pytest.approx(mean_surface_distance(shifted_a, shifted_b), rel=1e-12)


# -- components -------------------------------------------------------------------


def test_diagonal_pixels_single_component_under_8_connectivity():
    m = np.zeros((4, 4), dtype=bool)
    m[1, 1] = m[2, 2] = True
    _, count8 = label_components(m, connectivity=8)
    _, count4 = label_components(m, connectivity=4)
    assert count8 == 1 and count4 == 2


def test_labels_match_flood_fill_oracle():
    rng = np.random.default_rng(8)
    for conn in (4, 8):
        for _ in range(25):
            m = random_mask(rng)
            labels, count = label_components(m, connectivity=conn)
            olabels, ocount = oracle_flood_labels(m, connectivity=conn)
            assert count == ocount
            # same partition: bijection between label ids
            mapping = {}
            for i in range(16):
                for j in range(16):
                    if m[i, j]:
                        mapping.setdefault(labels[i, j], set()).add(olabels[i, j])
            assert all(len(v) == 1 for v in mapping.values())


def test_confusion_perfect_single_blob():
    m = np.zeros((8, 8), dtype=bool)
    m[2:5, 2:5] = True
    c = component_confusion(m, m)
    assert (c.tp, c.fp, c.fn, c.tpr, c.ppv) == (1, 0, 0, 1.0, 1.0)


def test_confusion_hand_built_two_thirds_case():
    gt = np.zeros((16, 16), dtype=bool)
    gt[1:3, 1:3] = True
    gt[1:3, 8:10] = True
    gt[10:13, 10:13] = True
    pred = np.zeros((16, 16), dtype=bool)
    pred[2, 2] = True  # hits blob 1
    pred[11, 11] = True  # hits blob 3
    pred[13:15, 1:3] = True  # spurious
    c = component_confusion(gt, pred)
    assert (c.tp, c.fp, c.fn) == (2, 1, 1)
    assert c.tpr == pytest.approx(2 / 3)
    assert c.ppv == pytest.approx(2 / 3)


def test_confusion_conventions_for_empty_masks():
    empty = np.zeros((8, 8), dtype=bool)
    blob = np.zeros((8, 8), dtype=bool)
    blob[1:3, 1:3] = True
    assert component_confusion(empty, blob).tpr == 1.0
    assert component_confusion(blob, empty).ppv == 1.0


def test_confusion_matches_brute_force_on_random_pairs():
    rng = np.random.default_rng(9)
    for _ in range(100):
        gt, pred = random_mask(rng), random_mask(rng)
        c = component_confusion(gt, pred)
        tp, fp, fn = oracle_confusion(gt, pred)
        assert (c.tp, c.fp, c.fn) == (tp, fp, fn)


def test_confusion_shape_mismatch():
    with pytest.raises(ValueError):
        component_confusion(np.zeros((4, 4), dtype=bool), np.zeros((4, 5), dtype=bool))
