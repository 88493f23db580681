import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from geolora import linalg
from geolora.errors import InvalidArgument

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


def matrices(max_side=8):
    return st.tuples(st.integers(1, max_side), st.integers(1, max_side)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite))


def test_qr_identity_columns():
    Q = linalg.qr_orthonormalize(np.eye(3)[:, :2])
    assert np.allclose(np.abs(Q), np.eye(3)[:, :2], atol=1e-15)


def test_qr_single_column_normalized():
    Q = linalg.qr_orthonormalize(np.array([[3.0, 0], [4, 0], [0, 5]]))
    assert np.allclose(np.abs(Q[:, 0]), [0.6, 0.8, 0.0], atol=1e-15)


def test_qr_duplicate_columns_still_orthonormal(rng):
    a = rng.standard_normal((6, 1))
    Q = linalg.qr_orthonormalize(np.hstack([a, a, rng.standard_normal((6, 1))]))
    assert linalg.orthonormality_error(Q) < 1e-12
    assert abs(Q[:, 0] @ Q[:, 1]) < 1e-12


def test_qr_too_many_columns():
    with pytest.raises(InvalidArgument):
        linalg.qr_orthonormalize(np.ones((2, 3)))


def test_qr_rejects_nonfinite():
    with pytest.raises(InvalidArgument):
        linalg.qr_orthonormalize(np.array([[np.nan], [1.0]]))


def test_qr_nested_spans(rng):
    A = rng.standard_normal((7, 4))
    Q = linalg.qr_orthonormalize(A)
    for j in range(1, 5):
        P = Q[:, :j] @ Q[:, :j].T
        assert np.allclose(P @ A[:, :j], A[:, :j], atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(matrices())
def test_qr_orthonormal_property(a):
    if a.shape[1] > a.shape[0]:
        a = a.T
    Q = linalg.qr_orthonormalize(a)
    assert linalg.orthonormality_error(Q) < 1e-12


def test_svd_diagonal():
    P, s, Q = linalg.svd(np.diag([3.0, 1.0]))
    assert np.allclose(s, [3, 1])
    assert np.allclose(np.abs(P), np.eye(2)) and np.allclose(np.abs(Q), np.eye(2))


def test_svd_stiffness_target_block():
    _, s, _ = linalg.svd(np.array([[0.0, 15.0], [-2.0, 0.0]]))
    assert np.allclose(s, [15.0, 2.0], atol=1e-13)


def test_svd_random_reconstruction():
    A = np.random.default_rng(5).standard_normal((5, 5))
    P, s, Q = linalg.svd(A)
    assert linalg.frobenius_norm(A - (P * s) @ Q.T) / linalg.frobenius_norm(A) < 1e-10


def test_svd_sign_convention(rng):
    P, _, _ = linalg.svd(rng.standard_normal((6, 4)))
    idx = np.argmax(np.abs(P), axis=0)
    assert np.all(P[idx, np.arange(P.shape[1])] > 0)


def test_svd_deterministic(rng):
    A = rng.standard_normal((9, 5))
    r1, r2 = linalg.svd(A), linalg.svd(A.copy())
    for x, y in zip(r1, r2):
        assert np.array_equal(x, y)


def test_svd_matches_gram_eigenvalues(rng):
    # independent oracle: eigenvalues of A^T A
    A = rng.standard_normal((8, 5))
    ev = np.sort(np.linalg.eigvalsh(A.T @ A))[::-1]
    assert np.allclose(linalg.svd(A).singular_values, np.sqrt(np.clip(ev, 0, None)), atol=1e-12)


@settings(max_examples=60, deadline=None)
@given(matrices())
def test_svd_properties(a):
    P, s, Q = linalg.svd(a)
    assert linalg.frobenius_norm(a - (P * s) @ Q.T) / max(1.0, linalg.frobenius_norm(a)) < 1e-10
    assert np.all(np.diff(s) <= 0) and np.all(s >= 0)
    assert linalg.orthonormality_error(P) < 1e-12 and linalg.orthonormality_error(Q) < 1e-12
    assert np.allclose(linalg.svd(a.T).singular_values, s, atol=1e-12 * max(1.0, s[0]))


def test_frobenius_norm():
    assert linalg.frobenius_norm(np.zeros((3, 2))) == 0.0
    assert linalg.frobenius_norm(np.array([[3.0, 4.0]])) == 5.0
    A = np.random.default_rng(2).standard_normal((4, 7))
    assert abs(linalg.frobenius_norm(A) - sum(x * x for x in A.ravel()) ** 0.5) < 1e-13


def test_orthonormal_complement_new_direction(rng):
    U = linalg.qr_orthonormalize(rng.standard_normal((10, 3)))
    d = rng.standard_normal(10)
    K = U @ rng.standard_normal((3, 3))
    K[:, 1] += d
    Ut = linalg.orthonormal_complement(U, K)
    full = np.hstack([U, Ut])
    assert linalg.orthonormality_error(full) < 1e-12
    assert np.allclose(full @ (full.T @ K), K, atol=1e-12)


def test_orthonormal_complement_capped(rng):
    U = linalg.qr_orthonormalize(rng.standard_normal((5, 3)))
    Ut = linalg.orthonormal_complement(U, rng.standard_normal((5, 3)))
    assert Ut.shape == (5, 2)
    assert linalg.orthonormality_error(np.hstack([U, Ut])) < 1e-12
