import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mcfusion.baselines import (
    KalmanNumericalError,
    KfState,
    ProcessModel,
    inverse_variance_average,
    ivw_fuse_batch,
    kf_fuse_batch,
    kf_fuse_sequence,
    kf_predict,
    kf_update,
    tune_process_noise,
)


def random_spd(rng, scale=1.0):
    A = rng.normal(size=(6, 6))
    return scale * (A @ A.T / 6 + 0.1 * np.eye(6))


def small_vec(rng, scale=0.1):
    # angles stay far from the wrap so the model is exactly linear
    return rng.normal(scale=scale, size=6)


def test_state_and_model_invariants():
    with pytest.raises(ValueError):
        KfState(np.zeros(6), np.triu(np.ones((6, 6))))
    with pytest.raises(ValueError):
        KfState(np.zeros(6), -np.eye(6))
    with pytest.raises(ValueError):
        ProcessModel(-np.eye(6))
    assert np.array_equal(ProcessModel.diagonal(1.0, 2.0).Q, np.diag([1, 1, 1, 2, 2, 2.0]))


def test_predict_examples():
    s = KfState(np.arange(6.0) * 0.1, np.eye(6))
    same = kf_predict(s, ProcessModel(np.zeros((6, 6))))
    assert np.array_equal(same.x, s.x) and np.array_equal(same.P, s.P)
    assert np.array_equal(kf_predict(s, ProcessModel(np.eye(6))).P, 2 * np.eye(6))
    rng = np.random.default_rng(0)
    P0, Q = random_spd(rng), random_spd(rng, 0.01)
    s = KfState(np.zeros(6), P0)
    for _ in range(7):
        s = kf_predict(s, ProcessModel(Q))
    assert np.allclose(s.P, P0 + 7 * Q, atol=1e-12)


def test_diffuse_limit_and_equal_weights():
    rng = np.random.default_rng(1)
    z1, z2, R = small_vec(rng), small_vec(rng), random_spd(rng)
    post = kf_update(KfState(np.zeros(6), 1e6 * np.eye(6)), z1, R)
    assert np.allclose(post.x, z1, rtol=1e-3, atol=1e-6)
    s = kf_update(kf_update(KfState.uninformative(), z1, R), z2, R)
    assert np.allclose(s.x, (z1 + z2) / 2, atol=1e-6)


def test_one_step_diffuse_equals_ivw():
    rng = np.random.default_rng(2)
    for _ in range(20):
        meas = [(small_vec(rng), random_spd(rng)) for _ in range(int(rng.integers(1, 6)))]
        mean, cov = inverse_variance_average(meas)
        out = kf_fuse_sequence([meas], ProcessModel(np.zeros((6, 6))))
        assert np.allclose(out[0], mean, atol=1e-8)
        s = KfState.uninformative()
        for z, R in meas:
            s = kf_update(s, z, R)
        assert np.allclose(s.x, mean, atol=1e-8) and np.allclose(s.P, cov, atol=1e-8)


def test_ivw_examples_and_errors():
    rng = np.random.default_rng(3)
    zs = [small_vec(rng) for _ in range(4)]
    R = random_spd(rng)
    mean, cov = inverse_variance_average([(z, R) for z in zs])
    assert np.allclose(mean, np.mean(zs, axis=0), atol=1e-12) and np.allclose(cov, R / 4, atol=1e-12)
    mean, cov = inverse_variance_average([(zs[0], R)])
    assert np.allclose(mean, zs[0], atol=1e-12) and np.allclose(cov, R, atol=1e-12)
    with pytest.raises(KalmanNumericalError):
        inverse_variance_average([(zs[0], np.diag([1, 1, 1, 1, 1, 0.0]))])
    batch = ivw_fuse_batch(np.array(zs)[None, None], np.array([R] * 4)[None, None])
    assert np.allclose(batch[0, 0], np.mean(zs, axis=0), atol=1e-12)


def batch_oracle(meas, Q, prior=None):
    """Joint Gaussian posterior over all states x_1..x_T of the random walk,
    solved as one weighted least-squares problem. Returns the last state's mean
    and covariance, i.e. the filtering posterior at T."""
    T = len(meas)
    n = 6 * T
    info = np.zeros((n, n))
    vec = np.zeros(n)
    Qi = np.linalg.inv(Q)
    if prior is not None:
        x0, P0 = prior  # x_1 ~ N(x0, P0 + Q)
        A = np.linalg.inv(P0 + Q)
        info[:6, :6] += A
        vec[:6] += A @ x0
    for t in range(1, T):
        a, b = slice(6 * (t - 1), 6 * t), slice(6 * t, 6 * t + 6)
        info[a, a] += Qi
        info[b, b] += Qi
        info[a, b] -= Qi
        info[b, a] -= Qi
    for t, step in enumerate(meas):
        s = slice(6 * t, 6 * t + 6)
        for z, R in step:
            Ri = np.linalg.inv(R)
            info[s, s] += Ri
            vec[s] += Ri @ z
    cov = np.linalg.inv(info)
    return (cov @ vec)[-6:], cov[-6:, -6:]


def run_filter(meas, Q, initial):
    s = initial
    for step in meas:
        s = kf_predict(s, ProcessModel(Q))
        for z, R in step:
            s = kf_update(s, z, R)
    return s


@pytest.mark.parametrize("with_prior", [False, True])
def test_sequence_matches_batch_oracle(with_prior):
    rng = np.random.default_rng(4 + with_prior)
    for _ in range(20):
        Q = random_spd(rng, 0.01)
        meas = [[(small_vec(rng), random_spd(rng, 0.05)) for _ in range(int(rng.integers(1, 4)))] for _ in range(5)]
        prior = (small_vec(rng), random_spd(rng, 0.1)) if with_prior else None
        initial = KfState(*prior) if with_prior else KfState.uninformative()
        mean, cov = batch_oracle(meas, Q, prior)
        s = run_filter(meas, Q, initial)
        assert np.allclose(s.x, mean, atol=1e-8) and np.allclose(s.P, cov, atol=1e-8)
        if all(len(step) == len(meas[0]) for step in meas):
            out = kf_fuse_sequence(meas, ProcessModel(Q), initial)
            assert np.allclose(out[-1], mean, atol=1e-8)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31))
def test_update_never_increases_trace(seed):
    rng = np.random.default_rng(seed)
    s = KfState(small_vec(rng), random_spd(rng, 10 ** rng.uniform(-3, 3)))
    post = kf_update(s, small_vec(rng), random_spd(rng, 10 ** rng.uniform(-3, 3)))
    assert np.trace(post.P) <= np.trace(s.P) * (1 + 1e-12)
    assert np.max(np.abs(post.P - post.P.T)) <= 1e-10 * np.abs(post.P).max()
    assert np.linalg.eigvalsh(post.P).min() >= -1e-10


def test_angle_residual_wrapped():
    s = KfState(np.array([0, 0, 0, 0, 0, np.pi - 0.1]), np.eye(6))
    post = kf_update(s, np.array([0, 0, 0, 0, 0, -np.pi + 0.1]), np.eye(6))
    # halfway along the short arc crosses the wrap point
    assert abs(abs(post.x[5]) - np.pi) < 1e-12


def test_singular_measurement_regularised():
    s = kf_update(KfState(np.zeros(6), np.eye(6)), np.ones(6) * 0.1, np.zeros((6, 6)))
    assert np.allclose(s.x, 0.1, atol=1e-8)


def test_memoryless_limit():
    rng = np.random.default_rng(6)
    zs = rng.normal(scale=0.3, size=(30, 6))
    R = random_spd(rng, 0.01)
    out = kf_fuse_sequence([[(z, R)] for z in zs], ProcessModel(1e6 * np.eye(6)))
    assert np.allclose(out, zs, rtol=1e-3, atol=1e-6)


def test_consensus():
    rng = np.random.default_rng(7)
    zs = rng.normal(scale=0.3, size=(10, 6))
    meas = [[(z, random_spd(rng)) for _ in range(4)] for z in zs]
    out = kf_fuse_sequence(meas, ProcessModel(0.01 * np.eye(6)))
    assert np.allclose(out[0], zs[0], atol=1e-12)
    # after the first step the prior pulls towards the previous value, so use a
    # constant sequence for the full consensus check
    const = [[(zs[0], random_spd(rng)) for _ in range(4)] for _ in range(10)]
    assert np.allclose(kf_fuse_sequence(const, ProcessModel(0.01 * np.eye(6))), zs[0], atol=1e-12)


def test_batch_matches_per_sequence():
    rng = np.random.default_rng(8)
    means = rng.normal(scale=0.2, size=(3, 6, 2, 6))
    covs = np.stack([[[random_spd(rng, 0.05) for _ in range(2)] for _ in range(6)] for _ in range(3)])
    model = ProcessModel.diagonal(1e-3, 1e-4)
    out = kf_fuse_batch(means, covs, model)
    for s in range(3):
        meas = [[(means[s, t, n], covs[s, t, n]) for n in range(2)] for t in range(6)]
        assert np.allclose(out[s], kf_fuse_sequence(meas, model), atol=1e-13)
    with pytest.raises(ValueError):
        kf_fuse_batch(np.zeros((1, 0, 2, 6)), np.zeros((1, 0, 2, 6, 6)), model)


def linear_gaussian_world(seed, T=300, noise=(0.05, 0.1, 0.2)):
    rng = np.random.default_rng(seed)
    q = np.array([1e-4] * 3 + [1e-6] * 3)
    truth = np.cumsum(rng.normal(size=(T, 6)) * np.sqrt(q), axis=0) + [1.0, 0, 0, 0, 0, 0]
    sd = np.array(noise)[:, None] * [1, 1, 1, 0.1, 0.1, 0.1]
    means = truth[:, None, :] + rng.normal(size=(T, len(noise), 6)) * sd
    covs = np.broadcast_to(np.stack([np.diag(s**2) for s in sd]), (T, len(noise), 6, 6))
    return truth, means, covs, ProcessModel(np.diag(q))


def test_kf_beats_every_camera_in_its_model_class():
    for seed in range(20):
        truth, means, covs, model = linear_gaussian_world(seed)
        est = kf_fuse_batch(means[None], covs[None], model)[0]

        def rmse(x):
            return np.sqrt(np.mean(np.sum((x[:, :3] - truth[:, :3]) ** 2, axis=1)))

        assert rmse(est) <= min(rmse(means[:, n]) for n in range(means.shape[1]))


def test_tune_process_noise_picks_grid_minimum():
    truth, means, covs, _ = linear_gaussian_world(0, T=100)
    grid_t, grid_r = (1e-6, 1e-4, 1e-2), (1e-6,)
    model, score = tune_process_noise(means[None], covs[None], truth[None], grid_t, grid_r)
    scores = []
    for qt in grid_t:
        est = kf_fuse_batch(means[None], covs[None], ProcessModel.diagonal(qt, 1e-6))[0]
        scores.append(np.sqrt(np.mean(np.sum((est[:, :3] - truth[:, :3]) ** 2, axis=1))))
    assert score == pytest.approx(min(scores), rel=1e-12)
    assert model.Q[0, 0] == grid_t[int(np.argmin(scores))]
