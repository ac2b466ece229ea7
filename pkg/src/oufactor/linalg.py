"""Structured linear algebra: Kronecker algebra, matrix exponentials, vec,
and block tri-diagonal Cholesky factorization.

The block routines work on stacked arrays so that many independent systems
(one per subject) can be factorized in a single sweep:

    diag : (..., n, p, p)      diagonal blocks
    off  : (..., n - 1, p, p)  super-diagonal blocks, M[j, j+1]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "IndefiniteMatrixError",
    "BlockTridiagonal",
    "kron_product",
    "kron_sum",
    "mat_exp",
    "expm_decay",
    "vec",
    "unvec",
    "block_tridiag_solve",
    "block_tridiag_logdet",
    "block_cholesky",
    "block_cholesky_solve",
]


class IndefiniteMatrixError(np.linalg.LinAlgError):
    """A factorization met a non-positive pivot."""


def _square(A) -> np.ndarray:
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {A.shape}")
    if not np.all(np.isfinite(A)):
        raise ValueError("matrix has non-finite entries")
    return A


def kron_product(A, B) -> np.ndarray:
    return np.kron(_square(A), _square(B))


def kron_sum(A, B) -> np.ndarray:
    """A (+) B = A (x) I_b + I_a (x) B."""
    A, B = _square(A), _square(B)
    return np.kron(A, np.eye(B.shape[0])) + np.kron(np.eye(A.shape[0]), B)


def mat_exp(A) -> np.ndarray:
    """Matrix exponential by scaling and squaring with a Pade approximant."""
    A = _square(A)
    with np.errstate(over="raise", invalid="raise"):
        try:
            E = scipy.linalg.expm(A)
        except FloatingPointError as exc:
            raise OverflowError("matrix exponential out of floating-point range") from exc
    if not np.all(np.isfinite(E)):
        raise OverflowError("matrix exponential out of floating-point range")
    return E


def expm_decay(theta: np.ndarray, ts: np.ndarray) -> np.ndarray:
    """exp(-theta * t) for every t in ``ts``; returns shape ts.shape + (p, p).

    Uses an eigendecomposition of ``theta`` shared by all t, falling back to
    batched scaling-and-squaring when the eigenvector basis is ill conditioned.
    """
    theta = np.asarray(theta, dtype=float)
    ts = np.asarray(ts, dtype=float)
    p = theta.shape[0]
    flat = ts.reshape(-1)
    if p == 1:
        out = np.exp(-theta[0, 0] * flat)[:, None, None]
        return out.reshape(ts.shape + (1, 1))
    w, P = np.linalg.eig(theta)
    if np.linalg.cond(P) < 1e6:
        Pinv = np.linalg.inv(P)
        E = np.exp(-np.multiply.outer(flat, w))
        out = np.einsum("ik,tk,kj->tij", P, E, Pinv)
        if np.iscomplexobj(out):
            out = out.real
    else:
        out = scipy.linalg.expm(-flat[:, None, None] * theta)
    out[flat == 0] = np.eye(p)
    return out.reshape(ts.shape + (p, p))


def vec(A) -> np.ndarray:
    """Stack the columns of A."""
    return np.asarray(A, dtype=float).reshape(-1, order="F")


def unvec(v, dim: int) -> np.ndarray:
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size != dim * dim:
        raise ValueError(f"vector of length {v.size} cannot form a {dim}x{dim} matrix")
    return v.reshape(dim, dim, order="F")


@dataclass(frozen=True)
class BlockTridiagonal:
    """Symmetric block tri-diagonal matrix stored by its nonzero blocks."""

    diag_blocks: np.ndarray  # (n, p, p)
    offdiag_blocks: np.ndarray  # (n - 1, p, p), block (j, j+1)

    def __post_init__(self):
        d = np.asarray(self.diag_blocks, dtype=float)
        o = np.asarray(self.offdiag_blocks, dtype=float)
        if d.ndim != 3 or d.shape[1] != d.shape[2]:
            raise ValueError("diag_blocks must have shape (n, p, p)")
        n, p = d.shape[0], d.shape[1]
        if n < 1:
            raise ValueError("need at least one block")
        o = o.reshape(max(n - 1, 0), p, p)
        object.__setattr__(self, "diag_blocks", d)
        object.__setattr__(self, "offdiag_blocks", o)

    @property
    def n_blocks(self) -> int:
        return self.diag_blocks.shape[0]

    @property
    def block_dim(self) -> int:
        return self.diag_blocks.shape[1]

    def to_dense(self) -> np.ndarray:
        n, p = self.n_blocks, self.block_dim
        M = np.zeros((n * p, n * p))
        for j in range(n):
            M[j * p:(j + 1) * p, j * p:(j + 1) * p] = self.diag_blocks[j]
        for j in range(n - 1):
            blk = self.offdiag_blocks[j]
            M[j * p:(j + 1) * p, (j + 1) * p:(j + 2) * p] = blk
            M[(j + 1) * p:(j + 2) * p, j * p:(j + 1) * p] = blk.T
        return M


def _chol(A: np.ndarray) -> np.ndarray:
    try:
        return np.linalg.cholesky(A)
    except np.linalg.LinAlgError as exc:
        raise IndefiniteMatrixError("matrix is not positive definite") from exc


def block_cholesky(diag: np.ndarray, off: np.ndarray):
    """Block Cholesky M = L L^T of stacked block tri-diagonal matrices.

    Returns ``(Linv, sub, logdet)`` where ``Linv[..., j]`` is the inverse of the
    j-th lower-triangular diagonal factor, ``sub[..., j]`` the sub-diagonal
    factor L[j+1, j], and ``logdet`` the log-determinant of each matrix.
    """
    diag = np.asarray(diag, dtype=float)
    off = np.asarray(off, dtype=float)
    n = diag.shape[-3]
    Linv = np.empty_like(diag)
    sub = np.empty_like(off)
    logdet = np.zeros(diag.shape[:-3])
    S = diag[..., 0, :, :]
    for j in range(n):
        L = _chol(S)
        logdet = logdet + 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
        Li = np.linalg.inv(L)
        Linv[..., j, :, :] = Li
        if j + 1 < n:
            # L[j+1, j] = M[j+1, j] L_jj^{-T}
            C = np.swapaxes(off[..., j, :, :], -1, -2) @ np.swapaxes(Li, -1, -2)
            sub[..., j, :, :] = C
            S = diag[..., j + 1, :, :] - C @ np.swapaxes(C, -1, -2)
    return Linv, sub, logdet


def block_cholesky_solve(Linv: np.ndarray, sub: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve M X = rhs given the factors from :func:`block_cholesky`.

    ``rhs`` has shape (..., n, p, m).
    """
    n = Linv.shape[-3]
    batch = np.broadcast_shapes(Linv.shape[:-3], rhs.shape[:-3])
    z = np.empty(batch + (n, Linv.shape[-1], rhs.shape[-1]))
    z[..., 0, :, :] = Linv[..., 0, :, :] @ rhs[..., 0, :, :]
    for j in range(1, n):
        z[..., j, :, :] = Linv[..., j, :, :] @ (rhs[..., j, :, :] - sub[..., j - 1, :, :] @ z[..., j - 1, :, :])
    x = np.empty_like(z)
    LinvT = np.swapaxes(Linv, -1, -2)
    x[..., n - 1, :, :] = LinvT[..., n - 1, :, :] @ z[..., n - 1, :, :]
    for j in range(n - 2, -1, -1):
        x[..., j, :, :] = LinvT[..., j, :, :] @ (
            z[..., j, :, :] - np.swapaxes(sub[..., j, :, :], -1, -2) @ x[..., j + 1, :, :]
        )
    return x


def block_tridiag_solve(M: BlockTridiagonal, rhs) -> np.ndarray:
    """Solve M x = rhs for a symmetric positive definite block tri-diagonal M."""
    rhs = np.asarray(rhs, dtype=float)
    n, p = M.n_blocks, M.block_dim
    if rhs.shape[0] != n * p:
        raise ValueError(f"rhs has length {rhs.shape[0]}, expected {n * p}")
    Linv, sub, _ = block_cholesky(M.diag_blocks, M.offdiag_blocks)
    x = block_cholesky_solve(Linv, sub, rhs.reshape(n, p, -1))
    return x.reshape(rhs.shape)


def block_tridiag_logdet(M: BlockTridiagonal) -> float:
    _, _, logdet = block_cholesky(M.diag_blocks, M.offdiag_blocks)
    return float(logdet)
