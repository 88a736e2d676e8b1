import warnings

import numpy as np
import pytest

from csdkit import checks
from csdkit.errors import ShapeError
from csdkit.gp import clamp_variance, linearized_predict, posterior, sample_prior, training_error_decay
from csdkit.kernel import KernelKind, cross, gram
from csdkit.nn import MlpSpec, TrainConfig, auto_learning_rate, forward, init_mlp, train_regression


def _instance(seed, n=5, q=20, dim=3, width=64):
    r = np.random.default_rng(seed)
    p = init_mlp(MlpSpec(dim, (width,), seed=seed))
    return p, r.standard_normal((n, dim)), r.standard_normal(n), r.standard_normal((q, dim))


# --- oracles ---------------------------------------------------------------

@pytest.mark.parametrize("kind", list(KernelKind))
def test_posterior_matches_explicit_inverse(kind):
    p, X, Y, Q = _instance(0)
    post = posterior(p, X, Y, Q, kind)
    K = cross(p, X, X, kind)
    K = 0.5 * (K + K.T)
    Kinv = np.linalg.inv(K)
    Ktx = cross(p, Q, X, kind)
    cov = cross(p, Q, Q, kind) - Ktx @ Kinv @ Ktx.T
    scale = np.max(np.abs(cross(p, Q, Q, kind)))
    np.testing.assert_allclose(post.mean, Ktx @ Kinv @ Y, atol=1e-8 * max(1.0, np.max(np.abs(post.mean))))
    np.testing.assert_allclose(post.cov, cov, atol=1e-8 * scale)
    assert post.clamp_count == 0


def test_single_point_schur():
    p, X, Y, Q = _instance(1, n=1)
    post = posterior(p, X, Y, Q)
    t = cross(p, Q, X)[:, 0]
    expect = np.array([cross(p, q[None], q[None])[0, 0] for q in Q]) - t ** 2 / cross(p, X, X)[0, 0]
    np.testing.assert_allclose(post.var, expect, rtol=1e-9, atol=1e-12)


def test_mc_mean_and_covariance():
    p, X, Y, Q = _instance(2, q=6)
    M = 100_000
    post = posterior(p, X, Y, Q)
    f0 = sample_prior(p, np.vstack([X, Q]), M, seed=3)
    out = linearized_predict(f0[:, :5], f0[:, 5:], p, X, Y, Q)
    se_mean = np.sqrt(post.var / M)
    assert np.all(np.abs(out.mean(axis=0) - post.mean) < 3 * se_mean + 1e-12)
    C = np.cov(out, rowvar=False)
    d = np.diag(post.cov)
    se_cov = np.sqrt((np.outer(d, d) + post.cov ** 2) / M)
    assert np.all(np.abs(C - post.cov) < 5 * se_cov)


def test_sample_prior_covariance():
    p, _, _, Z = _instance(4, q=5)
    M = 100_000
    draws = sample_prior(p, Z, M, seed=1)
    K = gram(p, Z).values
    d = np.diag(K)
    se = np.sqrt((np.outer(d, d) + K ** 2) / M)
    assert np.max(np.abs(np.cov(draws, rowvar=False) - K) / se) < 5


def test_decay_matches_linear_gd():
    # a linear net has a constant tangent kernel, so only the step size separates GD from the flow
    r = np.random.default_rng(5)
    X, Y = r.standard_normal((4, 2)), r.standard_normal(4)
    p = init_mlp(MlpSpec(2, (), "identity", bias_scale=1.0, seed=5))
    lr = 0.01 * auto_learning_rate(p, X)
    q, resid = p, []
    for _ in range(5):
        resid.append(forward(q, X) - Y)
        q, _ = train_regression(q, X, Y, TrainConfig(lr, 400))
    flow = training_error_decay(p, X, Y, lr / 4 * 400 * np.arange(5), 1.0)
    for a, b in zip(resid, flow):
        assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-2


def test_decay_tracks_wide_network():
    assert checks.dynamics_fidelity(width=2048)[0].passed


# --- examples and properties -----------------------------------------------

def test_interpolation_at_training_points():
    p, X, Y, _ = _instance(6)
    post = posterior(p, X, Y, X[:3])
    assert np.all(post.var <= 1e-8 * post.prior_var.max())
    np.testing.assert_allclose(post.mean, Y[:3], atol=1e-6)


def test_linearized_identities():
    p, X, Y, Q = _instance(7)
    post = posterior(p, X, Y, Q)
    np.testing.assert_allclose(linearized_predict(np.zeros(5), np.zeros(20), p, X, Y, Q), post.mean,
                               atol=1e-10)
    f0t = np.arange(20.0)
    np.testing.assert_array_equal(linearized_predict(Y, f0t, p, X, Y, Q), f0t)


def test_sample_prior_scalar_and_seeded():
    p, X, _, _ = _instance(8)
    a = sample_prior(p, X[:1], 50_000, seed=2)
    assert a.shape == (50_000, 1)
    k = gram(p, X[:1]).values[0, 0]
    assert abs(a.var() - k) < 5 * k * np.sqrt(2 / 50_000)
    np.testing.assert_array_equal(sample_prior(p, X, 10, seed=9), sample_prior(p, X, 10, seed=9))


def test_variance_bounds_and_monotone_in_data():
    for seed in range(10):
        p, X, Y, Q = _instance(seed, n=6)
        prev = posterior(p, X[:1], Y[:1], Q).var
        for n in range(2, 7):
            post = posterior(p, X[:n], Y[:n], Q)
            assert np.all(post.var >= 0) and np.all(post.var <= post.prior_var + 1e-12)
            assert np.all(post.var <= prev + 1e-8)
            prev = post.var


def test_decay_limits_and_monotone():
    p, X, Y, _ = _instance(9, n=4, width=128)
    t = np.array([0.0, 0.1, 1.0, 10.0, 1e4])
    R = training_error_decay(p, X, Y, t, 1.0)
    np.testing.assert_array_equal(R[0], forward(p, X) - Y)
    norms = np.linalg.norm(R, axis=1)
    assert np.all(np.diff(norms) <= 0)
    assert norms[-1] < 1e-10
    with pytest.raises(ValueError):
        training_error_decay(p, X, Y, [1.0, 0.5], 1.0)


def test_clamp_variance_counts():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        v, bad = clamp_variance(np.array([1.0, -1e-12, 0.0]), 1.0)
    assert bad == 0 and v[1] == 0.0
    with pytest.warns(RuntimeWarning):
        v, bad = clamp_variance(np.array([1.0, -1e-3]), 1.0)
    assert bad == 1 and np.all(v >= 0)


def test_shape_errors():
    p, X, Y, Q = _instance(0)
    with pytest.raises(ShapeError):
        posterior(p, X, Y[:3], Q)
    with pytest.raises(ShapeError):
        posterior(p, X[:0], Y[:0], Q)


def test_posterior_csv(tmp_path):
    p, X, Y, Q = _instance(0, q=3)
    posterior(p, X, Y, Q).to_csv(tmp_path / "post.csv")
    lines = (tmp_path / "post.csv").read_text().splitlines()
    assert lines[0] == "test_index,mean,var" and len(lines) == 4
