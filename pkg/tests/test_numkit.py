import numpy as np
import pytest

from lorafl.errors import InvalidInputError
from lorafl.numkit import RngStream, derive_stream, finite_diff_grad, svd


def eigen_oracle(m):
    """Singular values and right vectors from the eigendecomposition of M^T M."""
    w, v = np.linalg.eigh(m.T @ m)
    order = np.argsort(w)[::-1]
    return np.sqrt(np.clip(w[order], 0, None)), v[:, order]


def check_factors(m, res, tol=1e-8):
    U, S, V = res
    k = min(m.shape)
    assert U.shape == (m.shape[0], k) and V.shape == (m.shape[1], k) and S.shape == (k,)
    assert np.all(np.diff(S) <= 0) and np.all(S >= 0)
    np.testing.assert_allclose(U.T @ U, np.eye(k), atol=1e-10)
    np.testing.assert_allclose(V.T @ V, np.eye(k), atol=1e-10)
    scale = max(np.linalg.norm(m), 1.0)
    assert np.linalg.norm(U @ np.diag(S) @ V.T - m) <= tol * scale


def test_svd_diagonal():
    U, S, V = svd(np.diag([3.0, 1.0]))
    np.testing.assert_array_equal(S, [3.0, 1.0])
    np.testing.assert_allclose(np.abs(U), np.eye(2))
    np.testing.assert_allclose(U @ np.diag(S) @ V.T, np.diag([3.0, 1.0]))


def test_svd_zero_matrix():
    m = np.zeros((2, 3))
    res = svd(m)
    np.testing.assert_array_equal(res.S, [0.0, 0.0])
    check_factors(m, res)


def test_svd_random_against_eigen_oracle():
    m = np.random.default_rng(3).standard_normal((8, 5))
    res = svd(m)
    check_factors(m, res)
    s_oracle, _ = eigen_oracle(m)
    np.testing.assert_allclose(res.S, s_oracle, rtol=1e-7)


def test_svd_property_random_and_rank_deficient():
    gen = np.random.default_rng(11)
    for i in range(200):
        m_, n_ = gen.integers(1, 65, size=2)
        m = gen.standard_normal((m_, n_))
        if i % 3 == 0 and min(m_, n_) > 1:
            r = int(gen.integers(1, min(m_, n_)))
            m = gen.standard_normal((m_, r)) @ gen.standard_normal((r, n_))
        res = svd(m)
        check_factors(m, res)
        s_oracle = np.linalg.svd(m, compute_uv=False) if i % 3 == 0 else eigen_oracle(m)[0][: min(m_, n_)]
        big = s_oracle > 1e-6 * s_oracle[0]
        np.testing.assert_allclose(res.S[big], s_oracle[big], rtol=1e-7)


def test_svd_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        svd(np.zeros((0, 3)))
    with pytest.raises(InvalidInputError):
        svd(np.array([[1.0, np.nan]]))


def test_stream_determinism():
    a = RngStream(1).generator().random(100)
    b = RngStream(1).generator().random(100)
    np.testing.assert_array_equal(a, b)


def test_stream_path_sensitivity():
    a = derive_stream(RngStream(1), 5, 2).generator().random(10)
    b = derive_stream(RngStream(1), 2, 5).generator().random(10)
    assert not np.array_equal(a, b)
    c = RngStream(1).derive(5).derive(2).generator().random(10)
    np.testing.assert_array_equal(a, c)


def test_stream_distinct_labels_do_not_collide():
    keys = {RngStream(7, ("train", t, k)).key() for t in range(50) for k in range(20)}
    assert len(keys) == 1000
    assert RngStream(7, ("1",)).key() != RngStream(7, (1,)).key()


def test_stream_rejects_bool_labels():
    with pytest.raises(TypeError):
        RngStream(1, (True,)).key()


def test_finite_diff_square():
    g = finite_diff_grad(lambda x: float(x[0] ** 2), np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) <= 1e-8


def test_finite_diff_constant():
    np.testing.assert_array_equal(finite_diff_grad(lambda x: 4.0, np.ones(5)), np.zeros(5))


def test_finite_diff_nonfinite():
    with pytest.raises(InvalidInputError):
        finite_diff_grad(lambda x: np.inf, np.ones(2))


def test_finite_diff_does_not_mutate_input():
    x = np.arange(4.0)
    finite_diff_grad(lambda v: float(v @ v), x)
    np.testing.assert_array_equal(x, np.arange(4.0))
