"""EM GMM and baseline heatmap tests."""
import numpy as np
import pytest

from sms.baseline import DiagonalGMM, GMMFitError, baseline_heatmap, fit_gmm, whole_image_norms
from sms.features import PatchGrid


def test_single_component_recovers_sample_moments():
    rng = np.random.default_rng(0)
    data = rng.standard_normal((200, 3)) * [1.0, 2.0, 0.5] + [3.0, -1.0, 0.0]
    gmm = fit_gmm(data, 1, seed=0)
    np.testing.assert_allclose(gmm.means[0], data.mean(axis=0), rtol=1e-8)
    np.testing.assert_allclose(gmm.variances[0], data.var(axis=0), rtol=1e-8)
    np.testing.assert_allclose(gmm.weights, [1.0])


def test_two_component_recovery():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((300, 2)) * 0.3 + [4.0, 4.0]
    b = rng.standard_normal((300, 2)) * 0.3 - [4.0, 4.0]
    gmm = fit_gmm(np.concatenate([a, b]), 2, seed=1)
    means = gmm.means[np.argsort(gmm.means[:, 0])]
    np.testing.assert_allclose(means[0], [-4.0, -4.0], atol=0.2)
    np.testing.assert_allclose(means[1], [4.0, 4.0], atol=0.2)
    np.testing.assert_allclose(gmm.weights, [0.5, 0.5], atol=0.05)


def test_em_log_likelihood_monotone():
    rng = np.random.default_rng(2)
    data = np.concatenate([rng.standard_normal((100, 2)), rng.standard_normal((80, 2)) + 3.0])
    gmm = fit_gmm(data, 3, seed=2)
    hist = np.array(gmm.log_likelihood_history)
    assert len(hist) >= 2
    assert np.all(np.diff(hist) >= -1e-7)


def test_fit_deterministic_given_seed():
    rng = np.random.default_rng(3)
    data = rng.standard_normal((120, 4))
    a = fit_gmm(data, 2, seed=7)
    b = fit_gmm(data, 2, seed=7)
    np.testing.assert_array_equal(a.means, b.means)
    np.testing.assert_array_equal(a.variances, b.variances)
    np.testing.assert_array_equal(a.weights, b.weights)


def test_degenerate_data_errors_after_restarts():
    data = np.zeros((20, 2))  # identical points: zero variance is unavoidable
    with pytest.raises(GMMFitError):
        fit_gmm(data, 2, seed=0)


def test_log_prob_matches_direct_sum():
    rng = np.random.default_rng(4)
    gmm = DiagonalGMM(
        weights=np.array([0.3, 0.7]),
        means=rng.standard_normal((2, 3)),
        variances=0.5 + rng.random((2, 3)),
    )
    x = rng.standard_normal((10, 3))
    got = gmm.log_prob(x)
    for n in range(10):
        dens = 0.0
        for k in range(2):
            comp = np.prod(
                np.exp(-0.5 * (x[n] - gmm.means[k]) ** 2 / gmm.variances[k])
                / np.sqrt(2 * np.pi * gmm.variances[k])
            )
            dens += gmm.weights[k] * comp
        assert got[n] == pytest.approx(np.log(dens), rel=1e-10)


def test_gmm_json_roundtrip():
    rng = np.random.default_rng(5)
    gmm = DiagonalGMM(weights=np.array([1.0]), means=rng.standard_normal((1, 4)), variances=1 + rng.random((1, 4)))
    again = DiagonalGMM.from_dict(gmm.to_dict())
    np.testing.assert_array_equal(again.means, gmm.means)


def test_whole_image_norms_add_patch_squares():
    rng = np.random.default_rng(6)
    patch_norms = rng.random((4, 5))  # 4 patches, 5 scales
    got = whole_image_norms(patch_norms)
    expected = np.log1p(np.sqrt((patch_norms**2).sum(axis=0)))
    np.testing.assert_allclose(got, expected, rtol=1e-12)
    batched = whole_image_norms(np.stack([patch_norms, 2 * patch_norms]))
    assert batched.shape == (2, 5)


def test_baseline_heatmap_constant_norms_constant_map():
    grid = PatchGrid((8, 8), 4)
    gmm = DiagonalGMM(weights=np.array([1.0]), means=np.zeros((1, 3)), variances=np.ones((1, 3)))
    hm = baseline_heatmap(gmm, np.ones((4, 3)), grid)
    assert np.unique(hm.values).size == 1
    assert hm.values.shape == (8, 8)


def test_baseline_heatmap_patch_constant_structure():
    rng = np.random.default_rng(7)
    grid = PatchGrid((8, 8), 4)
    gmm = DiagonalGMM(weights=np.array([1.0]), means=np.zeros((1, 3)), variances=np.ones((1, 3)))
    hm = baseline_heatmap(gmm, rng.random((4, 3)), grid)
    for idx in range(4):
        rs, cs = grid.slices(idx)
        cell = hm.values[rs, cs]
        assert np.unique(cell).size == 1
