import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csdkit.errors import ShapeError, SingularKernelError
from csdkit.kernel import (
    DEFAULT_JITTER, KernelKind, KernelMatrix, cholesky_psd, cross, gram, last_layer_features,
    layer_blocks, ntk, solve_psd, write_kernel_csv,
)
from csdkit.nn import MlpSpec, init_mlp, jacobian


# --- oracles ---------------------------------------------------------------

def test_full_ntk_is_jacobian_inner_product(rng):
    p = init_mlp(MlpSpec(3, (12, 7), "tanh", bias_scale=0.4, seed=2))
    A, B = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(cross(p, A, B), jacobian(p, A) @ jacobian(p, B).T, rtol=1e-12, atol=1e-14)


def test_last_layer_is_masked_full_gradient(rng):
    spec = MlpSpec(3, (12, 7), bias_scale=0.4, seed=2)
    p = init_mlp(spec)
    A, B = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
    # last block of the flat order is the output layer: 7 weights then 1 bias
    start = spec.n_params - 7 - 1
    Ja, Jb = jacobian(p, A)[:, start:start + 7], jacobian(p, B)[:, start:start + 7]
    K = cross(p, A, B, KernelKind.LAST_LAYER)
    np.testing.assert_allclose(K, Ja @ Jb.T, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(dict(layer_blocks(p, A, B))["W2"], K, rtol=1e-12, atol=1e-14)


def test_layer_blocks_sum_to_full(rng):
    p = init_mlp(MlpSpec(2, (9, 5), "erf", bias_scale=0.2, seed=8))
    A, B = rng.standard_normal((3, 2)), rng.standard_normal((6, 2))
    blocks = layer_blocks(p, A, B)
    assert [n for n, _ in blocks] == ["W0", "b0", "W1", "b1", "W2", "b2"]
    np.testing.assert_allclose(sum(m for _, m in blocks), cross(p, A, B), rtol=1e-13, atol=1e-14)


def test_linear_closed_form(rng):
    p = init_mlp(MlpSpec(4, (), "identity", bias_scale=0.0, seed=0))
    x, y = rng.standard_normal(4), rng.standard_normal(4)
    assert ntk(p, x, y) == pytest.approx(x @ y / 4, abs=1e-15)


def test_gram_eigenvalues_nonnegative(rng):
    p = init_mlp(MlpSpec(3, (64,), seed=1))
    K = gram(p, rng.standard_normal((5, 3))).values
    assert np.linalg.eigvalsh(K).min() >= -1e-10


# --- examples --------------------------------------------------------------

def test_gram_single_point_and_cross_consistency(rng):
    p = init_mlp(MlpSpec(3, (32,), seed=1))
    X = rng.standard_normal((6, 3))
    assert gram(p, X[:1]).values[0, 0] == pytest.approx(ntk(p, X[0], X[0]), rel=1e-14)
    for kind in KernelKind:
        np.testing.assert_allclose(gram(p, X, kind).values, cross(p, X, X, kind), atol=1e-12)
        assert gram(p, X, kind).kind is kind


def test_ntk_diagonal_nonnegative(rng):
    for s in range(5):
        p = init_mlp(MlpSpec(2, (16,), seed=s))
        x = rng.standard_normal(2)
        assert ntk(p, x, x) >= 0
        assert ntk(p, x, x, KernelKind.LAST_LAYER) >= 0


def test_last_layer_features_inner_product(rng):
    p = init_mlp(MlpSpec(2, (16,), seed=3))
    X = rng.standard_normal((4, 2))
    F = last_layer_features(p, X)
    np.testing.assert_allclose(F @ F.T, gram(p, X, "last_layer").values, atol=1e-14)


def test_solve_identity(rng):
    B = rng.standard_normal((4, 2))
    K = KernelMatrix(np.eye(4))
    X = solve_psd(K, B)
    np.testing.assert_allclose(X, B / (1 + K.jitter_used), rtol=1e-14)
    np.testing.assert_allclose(X, B, rtol=1e-9)


def test_solve_random_psd_residual(rng):
    A = rng.standard_normal((8, 8))
    K = A @ A.T + 0.1 * np.eye(8)
    B = rng.standard_normal((8, 3))
    X = solve_psd(K, B)
    assert np.max(np.abs(K @ X - B)) < 1e-8 * np.max(np.abs(B))


def test_duplicate_point_escalates_jitter(rng):
    p = init_mlp(MlpSpec(3, (32,), seed=0))
    X = rng.standard_normal((4, 3))
    K = gram(p, np.vstack([X, X[:1]]))
    solve_psd(K, np.ones(5))
    assert K.jitter_used > DEFAULT_JITTER
    with pytest.raises(SingularKernelError):
        cholesky_psd(K.values, ladder=False)


def test_cholesky_rejects_bad_input():
    with pytest.raises(ShapeError):
        cholesky_psd(np.ones((2, 3)))
    with pytest.raises(SingularKernelError):
        cholesky_psd(np.zeros((3, 3)))
    with pytest.raises(SingularKernelError):
        cholesky_psd(-np.eye(3))


def test_kernel_csv(tmp_path):
    write_kernel_csv(np.array([[1.0, 0.5], [0.5, 2.0]]), tmp_path / "k.csv")
    lines = (tmp_path / "k.csv").read_text().splitlines()
    assert lines[0] == "i,j,value" and lines[2] == "0,1,0.5" and len(lines) == 5


# --- properties ------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1, 12),
       act=st.sampled_from(["relu", "tanh", "erf"]), kind=st.sampled_from(list(KernelKind)))
def test_gram_invariants(seed, n, act, kind):
    r = np.random.default_rng(seed)
    p = init_mlp(MlpSpec(3, (24,), act, bias_scale=0.3, seed=seed))
    X = r.standard_normal((n, 3))
    M = cross(p, X, X, kind)
    assert np.max(np.abs(M - M.T)) < 1e-12
    K = gram(p, X, kind).values
    d = np.diag(K)
    assert np.all(K ** 2 <= np.outer(d, d) + 1e-9)
    assert np.linalg.eigvalsh(K).min() >= -1e-9 * np.trace(K) / n
