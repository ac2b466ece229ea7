"""Factor-analytic measurement layer and the exact marginal likelihood.

Outcomes of one subject are stacked time-major: Y_i = (y(t_1), ..., y(t_n)),
each y(t_j) a K-vector. Sigma_u and Sigma_eps are diagonal and stored as
variance vectors; optimizers work with log standard deviations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .linalg import IndefiniteMatrixError, block_cholesky, block_cholesky_solve, expm_decay
from ._kernels import structured_neg2_loglik
from .ou import InvalidDriftError, OUParams, check_grid, latent_covariance, precision_blocks, rescale_to_unit_variance, stationary_variance

__all__ = [
    "ModelSpec",
    "MeasurementParams",
    "ModelParams",
    "SubjectPanel",
    "PanelBatch",
    "MeasurementGradient",
    "as_batch",
    "assemble_sigma_star",
    "neg2_loglik",
    "neg2_loglik_structured",
    "neg2_loglik_and_gradient",
    "analytic_gradient",
    "identify",
    "flip_signs",
]


@dataclass(frozen=True)
class ModelSpec:
    """Outcome-to-factor structure; each outcome loads on exactly one factor.

    ``sign_anchors`` maps a factor to the outcome whose loading is kept
    positive; by default the first outcome assigned to each factor.
    """

    outcomes: tuple
    factors: tuple
    loading_map: dict
    sign_anchors: dict = field(default_factory=dict)

    def __post_init__(self):
        outcomes, factors = tuple(self.outcomes), tuple(self.factors)
        object.__setattr__(self, "outcomes", outcomes)
        object.__setattr__(self, "factors", factors)
        if len(set(outcomes)) != len(outcomes) or len(set(factors)) != len(factors):
            raise ValueError("duplicate outcome or factor names")
        if not outcomes or not factors:
            raise ValueError("need at least one outcome and one factor")
        for o in outcomes:
            if o not in self.loading_map:
                raise ValueError(f"outcome {o!r} has no factor assignment")
            if self.loading_map[o] not in factors:
                raise ValueError(f"outcome {o!r} maps to unknown factor {self.loading_map[o]!r}")
        extra = set(self.loading_map) - set(outcomes)
        if extra:
            raise ValueError(f"loading_map names unknown outcomes {sorted(extra)}")
        anchors = dict(self.sign_anchors)
        for f in factors:
            members = [o for o in outcomes if self.loading_map[o] == f]
            if not members:
                raise ValueError(f"factor {f!r} has no outcomes")
            anchors.setdefault(f, members[0])
        for f, o in anchors.items():
            if f not in factors:
                raise ValueError(f"sign anchor for unknown factor {f!r}")
            if self.loading_map.get(o) != f:
                raise ValueError(f"sign anchor {o!r} does not load on factor {f!r}")
        object.__setattr__(self, "loading_map", dict(self.loading_map))
        object.__setattr__(self, "sign_anchors", anchors)

    @classmethod
    def from_assignment(cls, assignment: Sequence[int], outcomes=None, factors=None) -> "ModelSpec":
        """Spec from a list giving the factor index of each outcome."""
        assignment = [int(a) for a in assignment]
        p = max(assignment) + 1
        outcomes = tuple(outcomes or (f"y{k + 1}" for k in range(len(assignment))))
        factors = tuple(factors or (f"f{j + 1}" for j in range(p)))
        return cls(outcomes, factors, {o: factors[a] for o, a in zip(outcomes, assignment)})

    @property
    def K(self) -> int:
        return len(self.outcomes)

    @property
    def p(self) -> int:
        return len(self.factors)

    @property
    def factor_of(self) -> np.ndarray:
        return np.array([self.factors.index(self.loading_map[o]) for o in self.outcomes])

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros((self.K, self.p), dtype=bool)
        m[np.arange(self.K), self.factor_of] = True
        return m

    @property
    def anchor_index(self) -> np.ndarray:
        return np.array([self.outcomes.index(self.sign_anchors[f]) for f in self.factors])


@dataclass(frozen=True)
class MeasurementParams:
    loadings: np.ndarray  # (K, p), zero outside the structure mask
    var_u: np.ndarray  # (K,) diagonal of Sigma_u
    var_eps: np.ndarray  # (K,) diagonal of Sigma_eps
    mask: np.ndarray  # (K, p) bool, one True per row

    def __post_init__(self):
        lam = np.atleast_2d(np.asarray(self.loadings, dtype=float))
        mask = np.asarray(self.mask, dtype=bool).reshape(lam.shape)
        var_u = np.asarray(self.var_u, dtype=float).reshape(-1)
        var_eps = np.asarray(self.var_eps, dtype=float).reshape(-1)
        K = lam.shape[0]
        if var_u.size != K or var_eps.size != K:
            raise ValueError("variance vectors must have one entry per outcome")
        if np.any(mask.sum(axis=1) != 1):
            raise ValueError("each outcome must load on exactly one factor")
        if np.any(lam[~mask] != 0.0):
            raise ValueError("loadings outside the structure mask must be zero")
        if np.any(var_eps <= 0.0) or np.any(var_u < 0.0):
            raise ValueError("need var_eps > 0 and var_u >= 0")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(var_u)) and np.all(np.isfinite(var_eps))):
            raise ValueError("non-finite measurement parameters")
        for name, val in (("loadings", lam), ("mask", mask), ("var_u", var_u), ("var_eps", var_eps)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)

    @classmethod
    def from_spec(cls, spec: ModelSpec, lam, var_u, var_eps) -> "MeasurementParams":
        """Build from the K nonzero loadings in outcome order."""
        L = np.zeros((spec.K, spec.p))
        L[np.arange(spec.K), spec.factor_of] = np.asarray(lam, dtype=float)
        return cls(L, var_u, var_eps, spec.mask)

    def with_free(self, lam, var_u, var_eps) -> "MeasurementParams":
        """Same structure, new free loadings and variances."""
        L = np.zeros(self.loadings.shape)
        L[np.arange(self.K), self.factor_of] = np.asarray(lam, dtype=float)
        return MeasurementParams(L, var_u, var_eps, self.mask)

    @property
    def K(self) -> int:
        return self.loadings.shape[0]

    @property
    def factor_of(self) -> np.ndarray:
        return np.argmax(self.mask, axis=1)

    @property
    def lam(self) -> np.ndarray:
        """The K free loadings."""
        return self.loadings[np.arange(self.K), self.factor_of].copy()


@dataclass(frozen=True)
class ModelParams:
    meas: MeasurementParams
    ou: OUParams

    def __post_init__(self):
        if self.meas.loadings.shape[1] != self.ou.p:
            raise ValueError("loadings and OU process disagree on the number of factors")

    @property
    def is_identified(self) -> bool:
        return bool(np.allclose(np.diag(stationary_variance(self.ou)), 1.0, atol=1e-8))


@dataclass(frozen=True)
class SubjectPanel:
    subject_id: str
    times: np.ndarray
    Y: np.ndarray  # (n, K)

    def __post_init__(self):
        t = check_grid(self.times)
        Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if Y.shape[0] != t.size:
            raise ValueError(f"subject {self.subject_id}: {t.size} times but {Y.shape[0]} outcome rows")
        if not np.all(np.isfinite(Y)):
            raise ValueError(f"subject {self.subject_id}: missing or non-finite outcomes")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "Y", Y)

    @property
    def n(self) -> int:
        return self.times.size


class PanelBatch:
    """Subjects padded to a common length for batched likelihood sweeps."""

    def __init__(self, panels: Sequence[SubjectPanel]):
        panels = list(panels)
        if not panels:
            raise ValueError("need at least one subject")
        K = panels[0].Y.shape[1]
        if any(sp.Y.shape[1] != K for sp in panels):
            raise ValueError("subjects disagree on the number of outcomes")
        self.panels = panels
        self.K = K
        self.N = len(panels)
        self.n = np.array([sp.n for sp in panels])
        n_max = int(self.n.max())
        self.n_max = n_max
        self.Y = np.zeros((self.N, n_max, K))
        self.gaps = np.ones((self.N, max(n_max - 1, 0)))
        for i, sp in enumerate(panels):
            self.Y[i, :sp.n] = sp.Y
            self.gaps[i, :sp.n - 1] = np.diff(sp.times)
        steps = np.arange(n_max)
        self.valid = steps[None, :] < self.n[:, None]
        self.gap_valid = steps[None, :-1] < (self.n[:, None] - 1)
        self.groups = {}
        for n_i in np.unique(self.n):
            idx = np.flatnonzero(self.n == n_i)
            self.groups[int(n_i)] = (
                idx,
                np.array([panels[i].times for i in idx]),
                np.array([panels[i].Y for i in idx]),
            )


def as_batch(data) -> PanelBatch:
    return data if isinstance(data, PanelBatch) else PanelBatch(data)


def assemble_sigma_star(params: ModelParams, times) -> np.ndarray:
    """Var(Y_i) = (I (x) Lambda) Psi (I (x) Lambda)^T + J (x) Sigma_u + I (x) Sigma_eps."""
    t = check_grid(times)
    n = t.size
    Lam = params.meas.loadings
    IL = np.kron(np.eye(n), Lam)
    S = IL @ latent_covariance(params.ou, t) @ IL.T
    S += np.kron(np.ones((n, n)), np.diag(params.meas.var_u))
    S += np.kron(np.eye(n), np.diag(params.meas.var_eps))
    S = 0.5 * (S + S.T)
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise IndefiniteMatrixError("Sigma* is not positive definite") from exc
    return S


def _group_sigma(params: ModelParams, times: np.ndarray):
    """Batched Sigma* for subjects sharing n; returns (Sigma*, (I (x) Lambda) Psi)."""
    G, n = times.shape
    ou, meas = params.ou, params.meas
    p, K = ou.p, meas.K
    V = stationary_variance(ou)
    lag = times[:, None, :] - times[:, :, None]  # t_k - t_j
    decay = expm_decay(ou.theta, np.abs(lag))
    upper = V @ np.swapaxes(decay, -1, -2)
    lower = decay @ V
    psi = np.where((lag >= 0)[..., None, None], upper, lower)  # (G, n, n, p, p)
    P = psi.transpose(0, 1, 3, 2, 4).reshape(G, n * p, n * p)
    IL = np.kron(np.eye(n), meas.loadings)
    A = IL @ P
    S = A @ IL.T
    S += np.kron(np.ones((n, n)), np.diag(meas.var_u))
    S += np.kron(np.eye(n), np.diag(meas.var_eps))
    return 0.5 * (S + np.swapaxes(S, -1, -2)), A


def _dense_pass(params: ModelParams, batch: PanelBatch, gradient: bool):
    K, p = params.meas.K, params.ou.p
    total = 0.0
    g_lam = np.zeros(K)
    g_u = np.zeros(K)
    g_e = np.zeros(K)
    for n, (_, times, Y) in batch.groups.items():
        G = len(times)
        S, A = _group_sigma(params, times)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise IndefiniteMatrixError("Sigma* is not positive definite") from exc
        y = Y.reshape(G, n * K)
        logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
        if not gradient:
            z = np.linalg.solve(L, y[..., None])[..., 0]
            total += float(np.sum(logdet) + np.sum(z * z))
            continue
        Sinv = np.linalg.inv(S)
        alpha = (Sinv @ y[..., None])[..., 0]
        total += float(np.sum(logdet) + np.sum(alpha * y))
        W = Sinv - alpha[:, :, None] * alpha[:, None, :]
        Wb = W.reshape(G, n, K, n, K)
        steps = np.arange(n)
        g_e += Wb[:, steps, :, steps, :].sum(axis=(0, 1)).diagonal()
        g_u += Wb.sum(axis=(0, 1, 3)).diagonal()
        # d Sigma*/d lambda_k = (I (x) Lambda) Psi (I (x) e_f e_k^T) + transpose
        M = (W @ A).reshape(G, n, K, n, p)[:, steps, :, steps, :].sum(axis=(0, 1))
        g_lam += 2.0 * M[np.arange(K), params.meas.factor_of]
    return total, g_lam, g_u, g_e


def neg2_loglik(params: ModelParams, data) -> float:
    """-2 log L (constants dropped) from dense per-subject covariances."""
    return _dense_pass(params, as_batch(data), gradient=False)[0]


def neg2_loglik_structured(params: ModelParams, data, engine: str = "compiled") -> float:
    """-2 log L through the block tri-diagonal OU precision.

    The random intercepts are appended to the latent vector so that
    Sigma* = A C A^T + I (x) Sigma_eps with C^{-1} = blockdiag(Omega, Sigma_u^{-1});
    the matrix determinant and inversion lemmas reduce everything to one
    block tri-diagonal factorization plus a K x K Schur complement.
    ``engine`` selects the compiled per-subject sweep or the batched numpy one.
    """
    batch = as_batch(data)
    if engine == "compiled":
        return _structured_compiled(params, batch)
    if engine != "numpy":
        raise ValueError(f"unknown engine {engine!r}")
    meas, ou = params.meas, params.ou
    N, n_max, K = batch.N, batch.n_max, meas.K
    p = ou.p
    Lam = meas.loadings
    inv_e = 1.0 / meas.var_eps
    V = stationary_variance(ou)
    diag, off, logdet_omega = precision_blocks(ou.theta, V, batch.gaps, valid=batch.gap_valid)

    LtE = Lam.T * inv_e  # Lambda^T Sigma_eps^{-1}, (p, K)
    H = LtE @ Lam
    valid = batch.valid
    diag = diag + np.where(valid[..., None, None], H, 0.0)
    keep = meas.var_u > 0.0
    Bk = LtE[:, keep]  # (p, Kk)
    Kk = int(keep.sum())
    rhs = np.zeros((N, n_max, p, 1 + Kk))
    rhs[..., 0] = np.einsum("ak,gjk->gja", LtE, batch.Y)
    rhs[..., 1:] = np.where(valid[..., None, None], Bk, 0.0)
    Linv, sub, logdet_a = block_cholesky(diag, off)
    X = block_cholesky_solve(Linv, sub, rhs)

    b_eta = rhs[..., 0]
    quad_a = np.einsum("gja,gja->g", b_eta, X[..., 0])
    logdet = batch.n * np.sum(np.log(meas.var_eps)) - logdet_omega + logdet_a
    quad = np.einsum("gjk,k->g", batch.Y**2, inv_e) - quad_a
    if Kk:
        ysum = batch.Y.sum(axis=1)[:, keep] * inv_e[keep]
        BtX = np.einsum("ak,gjab->gkb", Bk, X)  # B^T A^{-1} [b_eta, B]
        D = np.diag(1.0 / meas.var_u[keep]) + batch.n[:, None, None] * np.diag(inv_e[keep])
        S = D - BtX[..., 1:]
        S = 0.5 * (S + np.swapaxes(S, -1, -2))
        s = ysum - BtX[..., 0]
        try:
            Ls = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise IndefiniteMatrixError("intercept Schur complement is not positive definite") from exc
        w = np.linalg.solve(Ls, s[..., None])[..., 0]
        logdet = logdet + np.sum(np.log(meas.var_u[keep])) + 2.0 * np.sum(
            np.log(np.diagonal(Ls, axis1=-2, axis2=-1)), axis=-1)
        quad = quad - np.sum(w * w, axis=-1)
    return float(np.sum(logdet + quad))


def _structured_compiled(params: ModelParams, batch: PanelBatch) -> float:
    meas, ou = params.meas, params.ou
    V = stationary_variance(ou)
    sign, logdet_v = np.linalg.slogdet(V)
    if sign <= 0:
        raise InvalidDriftError("stationary variance is not positive definite")
    Vinv = np.linalg.inv(V)
    Vinv = 0.5 * (Vinv + Vinv.T)
    Phi = expm_decay(ou.theta, batch.gaps)
    if Phi.ndim == 3:  # every subject observed once
        Phi = Phi.reshape(batch.N, 0, ou.p, ou.p)
    inv_e = 1.0 / meas.var_eps
    LtE = meas.loadings.T * inv_e
    keep = np.flatnonzero(meas.var_u > 0.0)
    value = structured_neg2_loglik(
        np.ascontiguousarray(Phi), V, Vinv, logdet_v, LtE @ meas.loadings, np.ascontiguousarray(LtE), keep,
        1.0 / meas.var_u[keep], inv_e, float(np.sum(np.log(meas.var_eps))),
        float(np.sum(np.log(meas.var_u[keep]))), batch.Y, batch.n)
    if not np.isfinite(value):
        raise IndefiniteMatrixError("structured factorization failed: a block is not positive definite")
    return float(value)


@dataclass(frozen=True)
class MeasurementGradient:
    """Gradient of -2 log L over the measurement block."""

    lam: np.ndarray  # d/d lambda_k for the K free loadings
    log_sd_u: np.ndarray  # d/d log sigma_u_k, Sigma_u = diag(sigma_u^2)
    log_sd_eps: np.ndarray  # d/d log sigma_eps_k

    @property
    def vector(self) -> np.ndarray:
        return np.concatenate([self.lam, self.log_sd_u, self.log_sd_eps])


def neg2_loglik_and_gradient(params: ModelParams, data):
    value, g_lam, g_u, g_e = _dense_pass(params, as_batch(data), gradient=True)
    # chain rule to log standard deviations: d var / d log sd = 2 var
    grad = MeasurementGradient(g_lam, 2.0 * params.meas.var_u * g_u, 2.0 * params.meas.var_eps * g_e)
    return value, grad


def analytic_gradient(params: ModelParams, data) -> MeasurementGradient:
    """Trace form: d(-2 log L)/d p = tr[(Sigma*^{-1} - a a^T) dSigma*/dp], a = Sigma*^{-1} Y."""
    return neg2_loglik_and_gradient(params, data)[1]


def identify(params: ModelParams) -> ModelParams:
    """Rescale the OU process to unit stationary variance and fold the scale into the loadings."""
    ou, c = rescale_to_unit_variance(params.ou)
    meas = params.meas
    loadings = meas.loadings / c[None, :]
    return ModelParams(MeasurementParams(loadings, meas.var_u, meas.var_eps, meas.mask), ou)


def flip_signs(params: ModelParams, signs) -> ModelParams:
    """Negate factors where ``signs`` is -1; theta is conjugated by diag(signs)."""
    s = np.asarray(signs, dtype=float)
    meas = params.meas
    theta = params.ou.theta * s[:, None] * s[None, :]
    return ModelParams(
        MeasurementParams(meas.loadings * s[None, :], meas.var_u, meas.var_eps, meas.mask),
        OUParams(theta, params.ou.sigma),
    )
