import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oufactor.linalg import (
    BlockTridiagonal,
    IndefiniteMatrixError,
    block_tridiag_logdet,
    block_tridiag_solve,
    expm_decay,
    kron_product,
    kron_sum,
    mat_exp,
    unvec,
    vec,
)


def random_spd_blocks(rng, p, n):
    """Random SPD block tri-diagonal matrix built as B B^T + I from a banded B."""
    lower = rng.normal(size=(n, p, p))
    below = rng.normal(size=(n - 1, p, p))
    dense_b = np.zeros((n * p, n * p))
    for j in range(n):
        dense_b[j * p:(j + 1) * p, j * p:(j + 1) * p] = np.tril(lower[j])
    for j in range(n - 1):
        dense_b[(j + 1) * p:(j + 2) * p, j * p:(j + 1) * p] = below[j]
    M = dense_b @ dense_b.T + np.eye(n * p)
    diag = np.array([M[j * p:(j + 1) * p, j * p:(j + 1) * p] for j in range(n)])
    off = np.array([M[j * p:(j + 1) * p, (j + 1) * p:(j + 2) * p] for j in range(n - 1)])
    return BlockTridiagonal(diag, off.reshape(n - 1, p, p)), M


def test_kron_product_trivial():
    np.testing.assert_array_equal(kron_product(np.eye(2), np.eye(3)), np.eye(6))
    np.testing.assert_array_equal(kron_product([[2.0]], [[3.0]]), [[6.0]])


def test_kron_product_entry():
    K = kron_product([[1, 2], [3, 4]], np.eye(2))
    # rows 2-3, cols 0-1 hold 3 * I
    assert K[2, 0] == 3.0
    assert K[3, 1] == 3.0 and K[2, 1] == 0.0


def test_kron_sum_cases():
    np.testing.assert_array_equal(kron_sum([[2.0]], [[3.0]]), [[5.0]])
    np.testing.assert_array_equal(kron_sum(np.zeros((2, 2)), np.zeros((2, 2))), np.zeros((4, 4)))
    theta = np.array([[1.0, 0.6], [4.0, 5.0]])
    np.testing.assert_allclose(np.diag(kron_sum(theta, theta)), [2, 6, 6, 10])


def test_mat_exp_cases():
    np.testing.assert_allclose(mat_exp(np.zeros((2, 2))), np.eye(2))
    np.testing.assert_allclose(mat_exp(np.diag([1.0, 2.0])), np.diag([np.e, np.e**2]), rtol=1e-14)
    rot = mat_exp([[0.0, 1.0], [-1.0, 0.0]])
    c, s = np.cos(1.0), np.sin(1.0)
    np.testing.assert_allclose(rot, [[c, s], [-s, c]], atol=1e-14)


def test_mat_exp_inverse_identity():
    rng = np.random.default_rng(0)
    for _ in range(20):
        A = rng.normal(size=(3, 3))
        np.testing.assert_allclose(mat_exp(A) @ mat_exp(-A), np.eye(3), atol=1e-10)


def test_mat_exp_overflow():
    with pytest.raises(OverflowError):
        mat_exp(np.array([[1e4]]))


def test_expm_decay_matches_mat_exp():
    rng = np.random.default_rng(1)
    ts = np.array([0.0, 0.1, 0.7, 2.5])
    for theta in (np.array([[1.0, 0.6], [4.0, 5.0]]), rng.normal(size=(3, 3)) + 3 * np.eye(3),
                  np.array([[1.0, 1.0], [0.0, 1.0]])):  # last one is defective
        out = expm_decay(theta, ts)
        for t, E in zip(ts, out):
            np.testing.assert_allclose(E, mat_exp(-theta * t), atol=1e-12)


def test_vec_unvec():
    np.testing.assert_array_equal(vec([[1, 3], [2, 4]]), [1, 2, 3, 4])
    np.testing.assert_array_equal(unvec([1, 2, 3, 4], 2), [[1, 3], [2, 4]])
    np.testing.assert_array_equal(vec(np.eye(2)), [1, 0, 0, 1])
    with pytest.raises(ValueError):
        unvec([1, 2, 3], 2)


@given(st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_vec_roundtrip_exact(dim, seed):
    A = np.random.default_rng(seed).normal(size=(dim, dim))
    np.testing.assert_array_equal(unvec(vec(A), dim), A)


@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_kron_sum_definition(a, b, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(a, a)), rng.normal(size=(b, b))
    expected = kron_product(A, np.eye(b)) + kron_product(np.eye(a), B)
    np.testing.assert_array_equal(kron_sum(A, B), expected)


@settings(max_examples=50)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(0, 2**31 - 1))
def test_exp_of_kron_sum(a, b, seed):
    rng = np.random.default_rng(seed)
    A, B = rng.normal(size=(a, a)), rng.normal(size=(b, b))
    np.testing.assert_allclose(mat_exp(kron_sum(A, B)), kron_product(mat_exp(A), mat_exp(B)),
                               rtol=1e-8, atol=1e-12)


def test_block_solve_identity():
    M = BlockTridiagonal(np.ones((3, 1, 1)), np.zeros((2, 1, 1)))
    np.testing.assert_allclose(block_tridiag_solve(M, [1.0, 2.0, 3.0]), [1, 2, 3])


def test_block_solve_block_diagonal():
    rng = np.random.default_rng(3)
    blocks = []
    for _ in range(3):
        G = rng.normal(size=(2, 2))
        blocks.append(G @ G.T + np.eye(2))
    M = BlockTridiagonal(np.array(blocks), np.zeros((2, 2, 2)))
    rhs = rng.normal(size=6)
    x = block_tridiag_solve(M, rhs)
    for j in range(3):
        np.testing.assert_allclose(x[2 * j:2 * j + 2], np.linalg.solve(blocks[j], rhs[2 * j:2 * j + 2]))


def test_block_logdet_trivial():
    M = BlockTridiagonal(np.broadcast_to(np.eye(2), (3, 2, 2)), np.zeros((2, 2, 2)))
    assert block_tridiag_logdet(M) == pytest.approx(0.0, abs=1e-14)
    M = BlockTridiagonal(np.broadcast_to(2 * np.eye(2), (2, 2, 2)), np.zeros((1, 2, 2)))
    assert block_tridiag_logdet(M) == pytest.approx(4 * np.log(2), abs=1e-12)


def test_block_routines_match_dense_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        p = int(rng.integers(1, 4))
        n = int(rng.integers(2, 11))
        M, dense = random_spd_blocks(rng, p, n)
        np.testing.assert_allclose(M.to_dense(), dense)
        rhs = rng.normal(size=n * p)
        x = block_tridiag_solve(M, rhs)
        x_ref = np.linalg.solve(dense, rhs)
        assert np.linalg.norm(x - x_ref) <= 1e-8 * np.linalg.norm(x_ref)
        assert block_tridiag_logdet(M) == pytest.approx(np.linalg.slogdet(dense)[1], abs=1e-8)


def test_block_solve_indefinite():
    M = BlockTridiagonal(np.array([[[1.0]], [[1.0]]]), np.array([[[2.0]]]))
    with pytest.raises(IndefiniteMatrixError):
        block_tridiag_solve(M, [1.0, 1.0])
    with pytest.raises(np.linalg.LinAlgError):
        block_tridiag_logdet(M)
