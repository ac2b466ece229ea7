"""Compiled per-subject sweep for the structured likelihood.

Mirrors the batched numpy path in ``measurement`` block for block; the
numpy version stays as the reference implementation. Work arrays are
allocated once, since the blocks are tiny and allocation would dominate.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _chol(A, L):
    """Lower Cholesky factor of A into L; returns log|A| or nan when not PD."""
    m = A.shape[0]
    logdet = 0.0
    for j in range(m):
        s = A[j, j]
        for k in range(j):
            s -= L[j, k] * L[j, k]
        if not s > 0.0:
            return np.nan
        d = np.sqrt(s)
        L[j, j] = d
        logdet += 2.0 * np.log(d)
        for i in range(j + 1, m):
            s = A[i, j]
            for k in range(j):
                s -= L[i, k] * L[j, k]
            L[i, j] = s / d
        for i in range(j):
            L[i, j] = 0.0
    return logdet


@njit(cache=True)
def _lower_solve(L, B):
    """B <- L^{-1} B for lower-triangular L."""
    m, c = B.shape
    for col in range(c):
        for i in range(m):
            s = B[i, col]
            for k in range(i):
                s -= L[i, k] * B[k, col]
            B[i, col] = s / L[i, i]


@njit(cache=True)
def _upper_solve_t(L, B):
    """B <- L^{-T} B for lower-triangular L."""
    m, c = B.shape
    for col in range(c):
        for i in range(m - 1, -1, -1):
            s = B[i, col]
            for k in range(i + 1, m):
                s -= L[k, i] * B[k, col]
            B[i, col] = s / L[i, i]


@njit(cache=True)
def _mm(A, B, out, ta=False, tb=False):
    """out <- op(A) op(B) with op the optional transpose."""
    r, c = out.shape
    inner = A.shape[0] if ta else A.shape[1]
    for i in range(r):
        for j in range(c):
            s = 0.0
            for k in range(inner):
                a = A[k, i] if ta else A[i, k]
                b = B[j, k] if tb else B[k, j]
                s += a * b
            out[i, j] = s


@njit(cache=True)
def structured_neg2_loglik(Phi, V, Vinv, logdet_v, H, LtE, keep, inv_var_u_keep, inv_e, sum_log_var_eps,
                           sum_log_var_u_keep, Y, n):
    """Sum over subjects of log|Sigma*_i| + Y_i^T Sigma*_i^{-1} Y_i; nan on a non-PD factor."""
    N = Y.shape[0]
    K = Y.shape[2]
    p = V.shape[0]
    Kk = keep.shape[0]
    c = 1 + Kk
    D = np.empty((p, p))
    Lp = np.zeros((p, p))
    L_prev = np.zeros((p, p))
    LR = np.zeros((p, p))
    Lk = np.zeros((Kk, Kk))
    G = np.empty((p, p))
    T1 = np.empty((p, p))
    R = np.empty((p, p))
    RG = np.empty((p, p))
    behind = np.zeros((p, p))
    off = np.zeros((p, p))
    off_prev = np.zeros((p, p))
    CT = np.empty((p, p))
    rhs = np.empty((p, c))
    z_prev = np.zeros((p, c))
    zz = np.empty((c, c))
    ysum = np.empty(K)
    S = np.empty((Kk, Kk))
    s = np.empty((Kk, 1))
    # gap-independent pieces: rhs columns for the intercepts
    Bk = np.empty((p, Kk))
    for a in range(p):
        for q in range(Kk):
            Bk[a, q] = LtE[a, keep[q]]
    total = 0.0
    for i in range(N):
        m = n[i]
        logdet_r = 0.0
        logdet_a = 0.0
        quad_y = 0.0
        zz[:, :] = 0.0
        ysum[:] = 0.0
        for j in range(m):
            for a in range(p):
                for b in range(p):
                    D[a, b] = Vinv[a, b] + H[a, b]
            if j > 0:
                for a in range(p):
                    for b in range(p):
                        D[a, b] += behind[a, b]
            if j < m - 1:
                Ph = Phi[i, j]
                _mm(V, Ph, T1, False, True)  # V Phi^T
                _mm(T1, Vinv, G)  # G = V Phi^T V^{-1}
                _mm(G, Ph, T1)
                _mm(T1, V, R)
                for a in range(p):
                    for b in range(p):
                        R[a, b] = V[a, b] - R[a, b]
                for a in range(p):
                    for b in range(a + 1, p):
                        v = 0.5 * (R[a, b] + R[b, a])
                        R[a, b] = v
                        R[b, a] = v
                ld = _chol(R, LR)
                if np.isnan(ld):
                    return np.nan
                logdet_r += ld
                RG[:, :] = G
                _lower_solve(LR, RG)
                _upper_solve_t(LR, RG)  # R^{-1} G
                _mm(RG, Ph, T1)
                for a in range(p):
                    for b in range(p):
                        D[a, b] += T1[a, b]
                        off[a, b] = -RG[a, b]
                _mm(G, RG, behind, True, False)
            for a in range(p):
                for b in range(a + 1, p):
                    v = 0.5 * (D[a, b] + D[b, a])
                    D[a, b] = v
                    D[b, a] = v
            for a in range(p):
                acc = 0.0
                for k in range(K):
                    acc += LtE[a, k] * Y[i, j, k]
                rhs[a, 0] = acc
                for q in range(Kk):
                    rhs[a, 1 + q] = Bk[a, q]
            if j > 0:
                # C = Omega_{j-1,j}^T L_{j-1}^{-T}; CT = L_{j-1}^{-1} Omega_{j-1,j}
                CT[:, :] = off_prev
                _lower_solve(L_prev, CT)
                for a in range(p):
                    for b in range(p):
                        acc = 0.0
                        for k in range(p):
                            acc += CT[k, a] * CT[k, b]
                        D[a, b] -= acc
                    for q in range(c):
                        acc = 0.0
                        for k in range(p):
                            acc += CT[k, a] * z_prev[k, q]
                        rhs[a, q] -= acc
            ld = _chol(D, Lp)
            if np.isnan(ld):
                return np.nan
            logdet_a += ld
            _lower_solve(Lp, rhs)
            for a in range(c):
                for b in range(c):
                    acc = 0.0
                    for k in range(p):
                        acc += rhs[k, a] * rhs[k, b]
                    zz[a, b] += acc
            L_prev[:, :] = Lp
            z_prev[:, :] = rhs
            off_prev[:, :] = off
            for k in range(K):
                y = Y[i, j, k]
                quad_y += y * y * inv_e[k]
                ysum[k] += y
        logdet = m * sum_log_var_eps + logdet_v + logdet_r + logdet_a
        quad = quad_y - zz[0, 0]
        if Kk > 0:
            for a in range(Kk):
                ka = keep[a]
                s[a, 0] = ysum[ka] * inv_e[ka] - zz[1 + a, 0]
                for b in range(Kk):
                    S[a, b] = -0.5 * (zz[1 + a, 1 + b] + zz[1 + b, 1 + a])
                S[a, a] += inv_var_u_keep[a] + m * inv_e[ka]
            ld = _chol(S, Lk)
            if np.isnan(ld):
                return np.nan
            _lower_solve(Lk, s)
            logdet += sum_log_var_u_keep + ld
            for a in range(Kk):
                quad -= s[a, 0] * s[a, 0]
        total += logdet + quad
    return total
