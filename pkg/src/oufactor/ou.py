"""Multivariate Ornstein-Uhlenbeck process with diagonal volatility.

    d eta(t) = -theta eta(t) dt + sigma dW(t)

Covariances follow the column-stacking vec convention, so that
vec(A X B) = (B^T (x) A) vec(X) and exp(A (+) B) = exp(A) (x) exp(B).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .linalg import BlockTridiagonal, expm_decay, kron_sum, mat_exp, unvec, vec

__all__ = [
    "InvalidDriftError",
    "OUParams",
    "check_grid",
    "stationary_variance",
    "conditional_cov",
    "marginal_cov",
    "marginal_cov_gap_form",
    "latent_covariance",
    "precision_matrix",
    "precision_blocks",
    "rescale_to_unit_variance",
    "sigma_from_theta",
    "sample_path",
    "correlation_decay",
    "half_lives",
]


class InvalidDriftError(ValueError):
    """Drift matrix violates the mean-reversion requirements."""


@dataclass(frozen=True)
class OUParams:
    theta: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        theta = np.atleast_2d(np.asarray(self.theta, dtype=float))
        sigma = np.atleast_2d(np.asarray(self.sigma, dtype=float))
        if sigma.shape == (1, theta.shape[0]) and theta.shape[0] > 1:
            sigma = np.diag(sigma[0])
        p = theta.shape[0]
        if theta.shape != (p, p) or sigma.shape != (p, p):
            raise ValueError(f"theta and sigma must be {p}x{p}")
        if not (np.all(np.isfinite(theta)) and np.all(np.isfinite(sigma))):
            raise ValueError("non-finite OU parameters")
        if np.any(sigma[~np.eye(p, dtype=bool)] != 0.0):
            raise ValueError("sigma must be diagonal")
        if np.any(np.diag(sigma) <= 0.0):
            raise ValueError("sigma must have a positive diagonal")
        if np.any(np.diag(theta) <= 0.0):
            raise InvalidDriftError("theta must have a positive diagonal")
        if np.any(np.linalg.eigvals(theta).real <= 0.0):
            raise InvalidDriftError("theta must have eigenvalues with positive real part")
        theta.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def from_diag(cls, theta, sigma_diag) -> "OUParams":
        return cls(np.asarray(theta, dtype=float), np.diag(np.atleast_1d(np.asarray(sigma_diag, dtype=float))))

    @property
    def p(self) -> int:
        return self.theta.shape[0]

    @property
    def sigma_diag(self) -> np.ndarray:
        return np.diag(self.sigma).copy()


def check_grid(times) -> np.ndarray:
    t = np.asarray(times, dtype=float).reshape(-1)
    if t.size < 1:
        raise ValueError("time grid is empty")
    if not np.all(np.isfinite(t)):
        raise ValueError("time grid has non-finite values")
    if np.any(np.diff(t) <= 0.0):
        raise ValueError("time grid must be strictly increasing (duplicate or unsorted times)")
    return t


def _lyapunov(theta: np.ndarray, sigma_diag: np.ndarray) -> np.ndarray:
    p = theta.shape[0]
    A = kron_sum(theta, theta)
    rhs = vec(np.diag(sigma_diag**2))
    try:
        x = np.linalg.solve(A, rhs)
    except np.linalg.LinAlgError as exc:
        raise InvalidDriftError("theta (+) theta is singular") from exc
    V = unvec(x, p)
    return 0.5 * (V + V.T)


def stationary_variance(params: OUParams) -> np.ndarray:
    """Solve (theta (+) theta) vec(V) = vec(sigma sigma^T)."""
    return _lyapunov(params.theta, params.sigma_diag)


def _check_times(s, t):
    if s < 0:
        raise ValueError("s must be non-negative")
    if s > t:
        raise ValueError("expected s <= t")


def conditional_cov(params: OUParams, s: float, t: float) -> np.ndarray:
    """Cov{eta(s), eta(t) | eta(0)} for 0 <= s <= t."""
    _check_times(s, t)
    th, p = params.theta, params.p
    TT = kron_sum(th, th)
    ss = vec(params.sigma @ params.sigma.T)
    # exp(s(th(+)th)) and exp(-(t th (+) s th)) commute; their product is
    # exp(-(t-s) th) (x) I, which stays bounded for large s.
    bracket = np.kron(mat_exp(-(t - s) * th), np.eye(p)) - np.kron(mat_exp(-t * th), mat_exp(-s * th))
    return unvec(np.linalg.solve(TT, bracket @ ss), p)


def marginal_cov(params: OUParams, s: float, t: float) -> np.ndarray:
    """Cov{eta(s), eta(t)} for the stationary process, 0 <= s <= t."""
    _check_times(s, t)
    th, p = params.theta, params.p
    TT = kron_sum(th, th)
    E = mat_exp(TT * s - kron_sum(th * t, th * s))
    out = unvec(np.linalg.solve(TT, E @ vec(params.sigma @ params.sigma.T)), p)
    if s == t:
        out = 0.5 * (out + out.T)
    return out


def marginal_cov_gap_form(params: OUParams, delta: float) -> np.ndarray:
    """V exp(-theta^T delta)."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    return stationary_variance(params) @ mat_exp(-params.theta.T * delta)


def latent_covariance(params: OUParams, times) -> np.ndarray:
    """Dense (n p) x (n p) covariance of eta over a time grid, time-major."""
    t = check_grid(times)
    n, p = t.size, params.p
    V = stationary_variance(params)
    gaps = np.abs(t[:, None] - t[None, :])
    decay = expm_decay(params.theta, gaps)  # exp(-theta |t_k - t_j|)
    upper = V @ np.swapaxes(decay, -1, -2)  # block (j, k) for j <= k
    lower = decay @ V
    jj, kk = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
    blocks = np.where((jj <= kk)[..., None, None], upper, lower)
    return blocks.transpose(0, 2, 1, 3).reshape(n * p, n * p)


def precision_blocks(theta: np.ndarray, V: np.ndarray, gaps: np.ndarray, valid=None):
    """Blocks of the OU precision matrix for grids with the given gaps.

    ``gaps`` has shape (..., n - 1). Returns ``(diag, off, logdet)`` with
    diag (..., n, p, p), off (..., n - 1, p, p) and logdet = log|Omega|.
    ``valid`` (same shape as gaps) marks real gaps; trailing padded occasions
    get identity diagonal blocks and contribute nothing to the log-determinant.
    """
    gaps = np.asarray(gaps, dtype=float)
    p = V.shape[0]
    m = gaps.shape[-1]
    Vinv = np.linalg.inv(V)
    Vinv = 0.5 * (Vinv + Vinv.T)
    sign, logdet_v = np.linalg.slogdet(V)
    if sign <= 0:
        raise InvalidDriftError("stationary variance is not positive definite")
    batch = gaps.shape[:-1]
    diag = np.broadcast_to(Vinv, batch + (m + 1, p, p)).copy()
    if m == 0:
        return diag, np.zeros(batch + (0, p, p)), np.full(batch, -logdet_v)
    Phi = expm_decay(theta, gaps)  # exp(-theta d)
    PhiT = np.swapaxes(Phi, -1, -2)
    G = V @ PhiT @ Vinv  # V exp(-theta^T d) V^{-1}
    R = V - G @ Phi @ V  # V - V e^{-th^T d} V^{-1} e^{-th d} V
    R = 0.5 * (R + np.swapaxes(R, -1, -2))
    try:
        L = np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise InvalidDriftError("transition covariance is not positive definite") from exc
    Linv = np.linalg.inv(L)
    Rinv = np.swapaxes(Linv, -1, -2) @ Linv
    logdet_r = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    off = -Rinv @ G
    GT = np.swapaxes(G, -1, -2)
    # first occasion: R^{-1}; interior adds both neighbours; last: V^{-1} + G^T R^{-1} G
    ahead = Rinv @ G @ Phi
    behind = GT @ Rinv @ G
    if valid is None:
        diag[..., :-1, :, :] += ahead
        diag[..., 1:, :, :] += behind
    else:
        valid = np.asarray(valid, dtype=bool)
        vv = valid[..., None, None]
        diag[..., :-1, :, :] += np.where(vv, ahead, 0.0)
        diag[..., 1:, :, :] += np.where(vv, behind, 0.0)
        real = np.concatenate([np.ones(batch + (1,), dtype=bool), valid], axis=-1)
        diag = np.where(real[..., None, None], diag, np.eye(p))
        off = np.where(vv, off, 0.0)
        logdet_r = np.where(valid, logdet_r, 0.0)
    diag = 0.5 * (diag + np.swapaxes(diag, -1, -2))
    logdet = -logdet_v - np.sum(logdet_r, axis=-1)
    return diag, off, logdet


def precision_matrix(params: OUParams, times) -> BlockTridiagonal:
    """Block tri-diagonal inverse of :func:`latent_covariance`."""
    t = check_grid(times)
    if t.size < 2:
        raise ValueError("precision matrix needs at least two time points")
    V = stationary_variance(params)
    cond = np.linalg.cond(V)
    if not np.isfinite(cond):
        raise InvalidDriftError("stationary variance is singular")
    if cond > 1e12:
        warnings.warn(f"stationary variance is ill conditioned (cond={cond:.3g})", RuntimeWarning)
    diag, off, _ = precision_blocks(params.theta, V, np.diff(t))
    return BlockTridiagonal(diag, off)


def rescale_to_unit_variance(params: OUParams):
    """Diagonal similarity rescaling to unit stationary variance.

    Returns ``(rescaled, c)`` where c_j = V_jj^{-1/2}; theta*_ij = c_i theta_ij / c_j
    and sigma*_jj = c_j sigma_jj. The stationary correlation and the spectrum
    of theta are unchanged; loadings absorb the scale as Lambda / c.
    """
    V = stationary_variance(params)
    c = 1.0 / np.sqrt(np.diag(V))
    theta = params.theta * c[:, None] / c[None, :]
    sigma = c * params.sigma_diag
    return OUParams.from_diag(theta, sigma), c


def sigma_from_theta(theta) -> np.ndarray:
    """Diagonal volatility that gives unit stationary variances for ``theta``.

    diag(V) is linear in sigma_jj^2, so the constraint is a p x p linear system.
    """
    theta = np.atleast_2d(np.asarray(theta, dtype=float))
    p = theta.shape[0]
    X = np.linalg.inv(kron_sum(theta, theta))
    idx = np.arange(p) * (p + 1)  # vec positions of diagonal entries
    A = X[np.ix_(idx, idx)]
    try:
        s2 = np.linalg.solve(A, np.ones(p))
    except np.linalg.LinAlgError as exc:
        raise InvalidDriftError("unit-variance system is singular") from exc
    if np.any(~np.isfinite(s2)) or np.any(s2 <= 0.0):
        raise InvalidDriftError("no positive volatility gives unit stationary variance")
    return np.sqrt(s2)


def sample_path(params: OUParams, times, seed=None, initial=None) -> np.ndarray:
    """Exact draw of eta over ``times``; (n, p).

    The first state is drawn from the stationary law unless ``initial`` fixes it.
    """
    t = check_grid(times)
    rng = np.random.default_rng(seed)
    p = params.p
    V = stationary_variance(params)
    out = np.empty((t.size, p))
    z0 = rng.standard_normal(p)
    out[0] = _gauss_root(V) @ z0 if initial is None else np.asarray(initial, dtype=float)
    if t.size > 1:
        Phi = expm_decay(params.theta, np.diff(t))
        for j in range(1, t.size):
            Q = V - Phi[j - 1] @ V @ Phi[j - 1].T
            out[j] = Phi[j - 1] @ out[j - 1] + _gauss_root(Q) @ rng.standard_normal(p)
    return out


def _gauss_root(S: np.ndarray) -> np.ndarray:
    S = 0.5 * (S + S.T)
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        w, U = np.linalg.eigh(S)
        return U * np.sqrt(np.clip(w, 0.0, None))


def correlation_decay(params: OUParams, gaps, atol: float = 1e-6) -> np.ndarray:
    """Lagged correlations Corr{eta_i(s), eta_j(s + gap)} = [V exp(-theta^T gap)]_ij.

    Requires unit stationary variances; returns shape (len(gaps), p, p).
    """
    V = stationary_variance(params)
    if np.max(np.abs(np.diag(V) - 1.0)) > atol:
        raise ValueError("correlation decay needs unit stationary variance; rescale first")
    gaps = np.asarray(gaps, dtype=float).reshape(-1)
    if np.any(gaps < 0):
        raise ValueError("gaps must be non-negative")
    d = np.sqrt(np.diag(V))
    C = V / np.outer(d, d)  # absorb the residual rounding in diag(V)
    np.fill_diagonal(C, 1.0)
    return C @ np.swapaxes(expm_decay(params.theta, gaps), -1, -2)


def half_lives(params: OUParams) -> np.ndarray:
    """ln 2 / Re(eigenvalue) for each mode of theta, slowest first."""
    rates = np.sort(np.linalg.eigvals(params.theta).real)
    return np.log(2.0) / rates
