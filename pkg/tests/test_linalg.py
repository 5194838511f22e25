import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from errwhiten.errors import DecompositionError, DomainError
from errwhiten.linalg import orthogonal_projector, pinv, rank, svd, weighted_projector


def test_svd_identity():
    res = svd(np.eye(3))
    np.testing.assert_allclose(res.singular_values, [1, 1, 1])
    np.testing.assert_allclose(np.abs(res.U), np.eye(3), atol=1e-14)
    np.testing.assert_allclose(res.U @ res.V.T, np.eye(3), atol=1e-14)


def test_svd_diagonal_with_zero():
    res = svd(np.diag([3.0, 0.0]))
    np.testing.assert_allclose(res.singular_values, [3.0, 0.0])
    np.testing.assert_allclose(res.U.T @ res.U, np.eye(2), atol=1e-12)


def test_svd_random_reconstruction(rng):
    M = rng.standard_normal((4, 3))
    res = svd(M)
    assert np.linalg.norm(res.reconstruct() - M) <= 1e-10
    np.testing.assert_allclose(res.U.T @ res.U, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(res.V.T @ res.V, np.eye(3), atol=1e-10)
    assert np.all(np.diff(res.singular_values) <= 0)


def test_svd_matches_lapack_singular_values(rng):
    for shape in [(7, 7), (12, 5), (5, 12), (30, 20)]:
        M = rng.standard_normal(shape)
        np.testing.assert_allclose(svd(M).singular_values, np.linalg.svd(M, compute_uv=False), rtol=1e-12)


def test_svd_sweep_cap_raises(rng):
    with pytest.raises(DecompositionError):
        svd(rng.standard_normal((6, 6)), max_sweeps=1)


def test_svd_rejects_nonfinite():
    with pytest.raises(ValueError):
        svd(np.array([[1.0, np.nan]]))


def test_pinv_examples():
    np.testing.assert_allclose(pinv(np.eye(4)), np.eye(4), atol=1e-15)
    np.testing.assert_allclose(pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]), atol=1e-15)


def test_pinv_normal_equation_identity_wide(rng):
    M = rng.standard_normal((3, 5))
    P = pinv(M)
    np.testing.assert_allclose(pinv(M.T @ M) @ M.T, P, atol=1e-8)


def test_pinv_penrose_conditions_rank_deficient(rng):
    M = rng.standard_normal((6, 2)) @ rng.standard_normal((2, 5))
    P = pinv(M)
    np.testing.assert_allclose(M @ P @ M, M, atol=1e-8)
    np.testing.assert_allclose(P @ M @ P, P, atol=1e-8)
    np.testing.assert_allclose(P, np.linalg.pinv(M), atol=1e-10)
    assert rank(M) == 2


def test_orthogonal_projector_examples(rng):
    np.testing.assert_allclose(orthogonal_projector(rng.standard_normal((4, 4))), np.eye(4), atol=1e-10)
    u = rng.standard_normal((5, 1))
    u /= np.linalg.norm(u)
    np.testing.assert_allclose(orthogonal_projector(u), u @ u.T, atol=1e-14)
    M = rng.standard_normal((5, 2))
    x = rng.standard_normal(2)
    P = orthogonal_projector(M)
    np.testing.assert_allclose(P @ (M @ x), M @ x, atol=1e-8)
    np.testing.assert_allclose(P @ P, P, atol=1e-8)
    np.testing.assert_allclose(P, P.T, atol=1e-14)


def test_weighted_projector_identity_weight_is_orthogonal(rng):
    J = rng.standard_normal((6, 3))
    np.testing.assert_allclose(weighted_projector(J, np.eye(6)), orthogonal_projector(J), atol=1e-10)


def test_weighted_projector_full_row_rank_is_identity(rng):
    J = rng.standard_normal((3, 8))
    W = np.diag([1.0, 4.0, 9.0])
    np.testing.assert_allclose(weighted_projector(J, W), np.eye(3), atol=1e-8)


def test_weighted_projector_against_formula(rng):
    J = rng.standard_normal((6, 3))
    W = np.diag(np.arange(1.0, 7.0))
    brute = J @ np.linalg.pinv(J.T @ W @ J) @ J.T @ W
    P = weighted_projector(J, W)
    np.testing.assert_allclose(P, brute, atol=1e-8)
    np.testing.assert_allclose(P @ P, P, atol=1e-8)
    np.testing.assert_allclose(W @ P, P.T @ W, atol=1e-8)


def test_weighted_projector_rejects_indefinite(rng):
    J = rng.standard_normal((3, 2))
    with pytest.raises(DomainError):
        weighted_projector(J, np.diag([1.0, -1.0, 2.0]))
    with pytest.raises(DomainError):
        weighted_projector(J, np.array([[1.0, 2.0, 0], [0, 1.0, 0], [0, 0, 1.0]]))


@settings(max_examples=40, deadline=None)
@given(
    m=st.integers(1, 12),
    n=st.integers(1, 12),
    r=st.integers(1, 12),
    seed=st.integers(0, 2**32 - 1),
)
def test_projector_rank_and_idempotence(m, n, r, seed):
    g = np.random.default_rng(seed)
    r = min(r, m, n)
    M = g.standard_normal((m, r)) @ g.standard_normal((r, n))
    P = orthogonal_projector(M)
    np.testing.assert_allclose(P @ P, P, atol=1e-8)
    assert rank(M) == r
    assert round(float(np.trace(P))) == r
