"""Score network, DSM loss and oracle tests."""
import numpy as np
import pytest

from sms import autodiff as ad
from sms.schedule import NoiseSchedule
from sms.scorenet import (
    ConvScoreNet,
    MLPScoreNet,
    TrainConfig,
    TrainState,
    analytic_gaussian_score,
    dsm_multiscale_loss,
    estimate_score,
    implicit_sm_loss,
    parzen_score,
    perturb,
    train_score,
)

SCHED = NoiseSchedule(0.1, 2.0, 5)


def test_perturb_small_sigma_limit():
    rng = np.random.default_rng(0)
    x = rng.random((4, 4))
    noisy, _ = perturb(x, 1e-12, rng)
    np.testing.assert_allclose(noisy, x, atol=1e-9)


def test_perturb_rejects_nonpositive_sigma():
    with pytest.raises(ValueError):
        perturb(np.zeros((2, 2)), 0.0, np.random.default_rng(0))


def test_perturb_seed_reproducible():
    x = np.zeros((8, 8))
    a, za = perturb(x, 0.7, np.random.default_rng(42))
    b, zb = perturb(x, 0.7, np.random.default_rng(42))
    assert np.array_equal(a, b) and np.array_equal(za, zb)


def test_perturb_noise_std():
    rng = np.random.default_rng(1)
    x = np.zeros((100, 1000))
    noisy, _ = perturb(x, 0.5, rng)
    assert abs((noisy - x).std() - 0.5) / 0.5 < 0.01


class _PerfectScore:
    """Oracle model: returns the exact DSM target -(x~ - x)/sigma^2."""

    def __init__(self, clean):
        self.clean = clean

    def forward(self, noisy, sigmas):
        sig = np.asarray(sigmas).reshape((-1,) + (1,) * (self.clean.ndim - 1))
        return ad.Tensor((self.clean - noisy) / sig**2)


class _ZeroScore:
    def forward(self, noisy, sigmas):
        return ad.Tensor(np.zeros_like(noisy))


def test_dsm_loss_zero_for_perfect_model():
    rng = np.random.default_rng(2)
    batch = rng.random((6, 8, 8))
    loss = dsm_multiscale_loss(batch, SCHED, _PerfectScore(batch), np.random.default_rng(3))
    assert float(loss.data) < 1e-18


def test_dsm_loss_for_zero_model_is_half_pixel_count():
    # with the sigma^2 weight the zero model's loss is 0.5*||z||^2, whose
    # expectation is 0.5 * (number of pixels)
    rng = np.random.default_rng(4)
    batch = rng.random((256, 8, 8))
    loss = float(dsm_multiscale_loss(batch, SCHED, _ZeroScore(), np.random.default_rng(5)).data)
    assert abs(loss - 32.0) < 2.0


def test_dsm_loss_matches_straight_line_reimplementation():
    rng = np.random.default_rng(6)
    batch = rng.random((3, 8, 8))
    model = ConvScoreNet((8, 8), SCHED, channels=(4, 4, 4), seed=0)
    got = float(dsm_multiscale_loss(batch, SCHED, model, np.random.default_rng(7)).data)

    # independent re-derivation with a cloned rng, same draw order
    rng2 = np.random.default_rng(7)
    t = rng2.random(3)
    sig = np.array([SCHED.sigma_at(float(v)) for v in t])
    z = rng2.standard_normal(batch.shape)
    noisy = batch + sig[:, None, None] * z
    total = 0.0
    for i in range(3):
        s = model.score(noisy[i], float(sig[i]))
        target = -(noisy[i] - batch[i]) / sig[i] ** 2
        total += 0.5 * sig[i] ** 2 * ((s - target) ** 2).sum()
    assert got == pytest.approx(total / 3.0, rel=1e-12)


def test_train_zero_iterations_returns_initial_parameters():
    rng = np.random.default_rng(8)
    data = rng.random((4, 8, 8))
    model = ConvScoreNet((8, 8), SCHED, channels=(4, 4, 4), seed=1)
    before = {k: t.data.copy() for k, t in model.params.items()}
    result = train_score(data, TrainConfig(iterations=0, batch_size=2, seed=1), SCHED, model=model)
    for k in before:
        assert np.array_equal(result.model.params[k].data, before[k])


def test_train_loss_decreases():
    rng = np.random.default_rng(9)
    data = rng.random((16, 8, 8)) * 0.5
    cfg = TrainConfig(iterations=300, batch_size=4, lr=2e-3, seed=2)
    result = train_score(data, cfg, SCHED, model=ConvScoreNet((8, 8), SCHED, channels=(4, 6, 8), seed=2))
    losses = np.array(result.losses)
    head = np.median(losses[:30])
    tail = np.median(losses[-30:])
    assert tail < head


def test_train_same_seed_bit_identical():
    rng = np.random.default_rng(10)
    data = rng.random((8, 8, 8))
    cfg = TrainConfig(iterations=40, batch_size=2, seed=3)

    def run():
        return train_score(data, cfg, SCHED, model=ConvScoreNet((8, 8), SCHED, channels=(4, 4, 4), seed=3))

    a, b = run(), run()
    for k in a.model.params:
        assert np.array_equal(a.model.params[k].data, b.model.params[k].data)
    assert a.losses == b.losses


def test_train_resume_bit_exact():
    # interrupt a run at its midpoint snapshot, rebuild from the snapshot,
    # and check the continuation matches the uninterrupted run bit for bit
    import copy

    rng = np.random.default_rng(11)
    data = rng.random((8, 8, 8))
    cfg = TrainConfig(iterations=40, batch_size=2, seed=4)
    snapshots = []

    def grab(model, state):
        snapshots.append(
            (
                {k: t.data.copy() for k, t in model.params.items()},
                TrainState(
                    iteration=state.iteration,
                    adam=copy.deepcopy(state.adam),
                    rng_state=copy.deepcopy(state.rng_state),
                    losses=list(state.losses),
                ),
            )
        )

    full = train_score(
        data, cfg, SCHED, model=ConvScoreNet((8, 8), SCHED, channels=(4, 4, 4), seed=4),
        snapshot_fn=grab, snapshot_every=20,
    )
    params20, state20 = snapshots[0]
    assert state20.iteration == 20

    restored = ConvScoreNet((8, 8), SCHED, channels=(4, 4, 4), seed=4)
    restored.params = {k: ad.Tensor(v, requires_grad=True) for k, v in params20.items()}
    resumed = train_score(data, cfg, SCHED, model=restored, state=state20)
    for k in full.model.params:
        assert np.array_equal(full.model.params[k].data, resumed.model.params[k].data)
    assert full.losses == resumed.losses


def test_estimate_score_shape_and_range():
    model = ConvScoreNet((8, 8), SCHED, channels=(4, 4, 4), seed=5)
    x = np.random.default_rng(12).random((8, 8))
    s = estimate_score(model, x, SCHED.sigma_min)
    assert s.shape == (8, 8)
    estimate_score(model, x, SCHED.sigma_max)
    with pytest.raises(ValueError):
        estimate_score(model, x, SCHED.sigma_max * 1.0001)
    with pytest.raises(ValueError):
        estimate_score(model, x, SCHED.sigma_min * 0.9999)


# -- Parzen oracle -------------------------------------------------------------


def test_parzen_single_point_matches_dsm_target():
    x = np.array([0.3, -0.2])
    query = np.array([1.0, 1.0])
    got = parzen_score(x[None], query, 0.5)
    np.testing.assert_allclose(got, (x - query) / 0.25, rtol=1e-12)


def test_parzen_symmetric_midpoint_is_zero():
    data = np.array([[1.0, 0.0], [-1.0, 0.0]])
    np.testing.assert_allclose(parzen_score(data, np.zeros(2), 0.7), 0.0, atol=1e-14)


def test_parzen_matches_finite_difference_of_log_density():
    rng = np.random.default_rng(13)
    data = rng.standard_normal((20, 2))
    sigma = 0.6

    def log_density(pt):
        diff = data - pt[None]
        logs = -0.5 * (diff**2).sum(axis=1) / sigma**2
        m = logs.max()
        return m + np.log(np.exp(logs - m).sum())  # additive constants cancel in the gradient

    for _ in range(5):
        pt = rng.standard_normal(2)
        got = parzen_score(data, pt, sigma)
        fd = np.zeros(2)
        h = 1e-5
        for j in range(2):
            e = np.zeros(2)
            e[j] = h
            fd[j] = (log_density(pt + e) - log_density(pt - e)) / (2 * h)
        np.testing.assert_allclose(got, fd, atol=1e-6)


# -- analytic Gaussian oracle ---------------------------------------------------


def test_gaussian_score_identity_case():
    got = analytic_gaussian_score(np.zeros(2), np.eye(2), 1.0, np.array([2.0, 0.0]))
    np.testing.assert_allclose(got, [-1.0, 0.0], rtol=1e-14)


def test_gaussian_score_zero_at_mean():
    rng = np.random.default_rng(14)
    a = rng.standard_normal((3, 3))
    cov = a @ a.T + 3 * np.eye(3)
    mu = rng.standard_normal(3)
    np.testing.assert_allclose(analytic_gaussian_score(mu, cov, 0.5, mu), 0.0, atol=1e-14)


def test_gaussian_score_matches_finite_differences():
    rng = np.random.default_rng(15)
    a = rng.standard_normal((3, 3))
    cov = a @ a.T + 3 * np.eye(3)
    mu = rng.standard_normal(3)
    sigma = 0.8
    shifted = cov + sigma**2 * np.eye(3)

    def log_density(pt):
        diff = pt - mu
        return -0.5 * diff @ np.linalg.solve(shifted, diff)  # constants drop out

    pt = rng.standard_normal(3)
    got = analytic_gaussian_score(mu, cov, sigma, pt)
    h = 1e-5
    fd = np.zeros(3)
    for j in range(3):
        e = np.zeros(3)
        e[j] = h
        fd[j] = (log_density(pt + e) - log_density(pt - e)) / (2 * h)
    np.testing.assert_allclose(got, fd, atol=1e-6)


def test_gaussian_score_rejects_non_spd():
    with pytest.raises(ValueError):
        analytic_gaussian_score(np.zeros(2), np.array([[1.0, 2.0], [0.0, 1.0]]), 0.5, np.zeros(2))
    with pytest.raises(ValueError):
        analytic_gaussian_score(np.zeros(2), -np.eye(2), 0.1, np.zeros(2))


# -- implicit score matching -----------------------------------------------------


class _FixedScore:
    def __init__(self, fn):
        self.fn = fn

    def score(self, x, sigma):
        return self.fn(np.asarray(x, dtype=np.float64))


def test_ism_zero_model():
    batch = np.random.default_rng(16).standard_normal((10, 3))
    assert implicit_sm_loss(_FixedScore(lambda x: np.zeros_like(x)), batch, 0.5) == pytest.approx(0.0, abs=1e-9)


def test_ism_negative_identity_model():
    rng = np.random.default_rng(17)
    batch = rng.standard_normal((50, 4))
    got = implicit_sm_loss(_FixedScore(lambda x: -x), batch, 0.5)
    expected = 0.5 * (batch**2).sum(axis=1).mean() - 4.0
    assert got == pytest.approx(expected, abs=1e-6)


def test_ism_rejects_large_dimension():
    with pytest.raises(ValueError):
        implicit_sm_loss(_FixedScore(lambda x: x), np.zeros((2, 65)), 0.5)


def test_mlp_scorenet_trains_toward_parzen():
    # quick version of the equivalence check: a short fixed-sigma run on a
    # tiny 2-d dataset should already align with the Parzen score field
    rng = np.random.default_rng(18)
    data = np.concatenate([rng.standard_normal((30, 2)) * 0.3 + [1.5, 0], rng.standard_normal((30, 2)) * 0.3 - [1.5, 0]])
    sigma = 0.5
    sched = NoiseSchedule(sigma / 2, sigma * 2, 3)
    cfg = TrainConfig(iterations=800, batch_size=60, lr=5e-3, seed=19, fixed_sigma=sigma)
    model = MLPScoreNet(2, sched, hidden=(48, 48), seed=19)
    train_score(data, cfg, sched, model=model)

    test_rng = np.random.default_rng(20)
    pts = data[test_rng.integers(0, 60, 100)] + sigma * test_rng.standard_normal((100, 2))
    est = model.score(pts, sigma)
    ref = np.stack([parzen_score(data, p, sigma) for p in pts])
    cos = (est * ref).sum(1) / (np.linalg.norm(est, axis=1) * np.linalg.norm(ref, axis=1) + 1e-12)
    assert cos.mean() > 0.95
