"""Initialization, block coordinate descent, standard errors and the sigma bootstrap."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import minimize

from .measurement import (
    MeasurementParams,
    ModelParams,
    ModelSpec,
    PanelBatch,
    SubjectPanel,
    as_batch,
    flip_signs,
    identify,
    neg2_loglik,
    neg2_loglik_and_gradient,
    neg2_loglik_structured,
)
from .optim import minimize_bfgs, safe_call
from .ou import InvalidDriftError, OUParams, correlation_decay, half_lives, sigma_from_theta

__all__ = [
    "FitConfig",
    "FitResult",
    "SEResult",
    "SigmaInterval",
    "DegenerateDataError",
    "default_ou",
    "initialize",
    "fit",
    "block_coordinate_descent",
    "standard_errors",
    "bootstrap_ou_draws",
    "bootstrap_sigma",
    "apply_sign_convention",
    "DecayCurves",
    "default_gap_grid",
    "decay_curves",
    "parameter_vector",
]

log = logging.getLogger(__name__)


class DegenerateDataError(ValueError):
    """Data cannot support the factor model (e.g. singular pooled covariance)."""


@dataclass
class FitConfig:
    max_block_iters: int = 200
    rel_param_tol: float = 1e-6
    loglik_tol: float = 1e-6
    max_step: float = 10.0
    theta_diag_lower: float = 1e-4
    theta_bound: float = 50.0  # |theta_ij| cap in block 2; beyond it the factor is white noise at usual gaps
    init_variance_floor: float = 0.1
    theta_init_diag_cap: float = 7.0
    bootstrap_draws: int = 1000
    seed: Optional[int] = None
    variance_lower: float = 1e-6  # floor on var_u and var_eps during optimization
    hessian_step: float = 1e-4
    measurement_max_iters: int = 100
    ou_max_iters: int = 150
    compute_se: bool = True
    bootstrap: bool = True
    dense_likelihood: bool = False

    def __post_init__(self):
        if self.max_block_iters < 1:
            raise ValueError("max_block_iters must be at least 1")
        for name in ("rel_param_tol", "loglik_tol", "max_step", "theta_diag_lower", "theta_bound", "init_variance_floor",
                     "theta_init_diag_cap", "variance_lower", "hessian_step"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.bootstrap_draws < 1:
            raise ValueError("bootstrap_draws must be at least 1")

    def objective(self):
        return neg2_loglik if self.dense_likelihood else neg2_loglik_structured


@dataclass
class SEResult:
    names: list
    estimates: np.ndarray  # reported scale: lambda, sd_u, sd_eps, theta
    se: np.ndarray  # nan where invalid
    valid: np.ndarray
    cov: Optional[np.ndarray]  # covariance of the reduced vector (lambda, log sd_u, log sd_eps, theta)
    hessian: np.ndarray
    message: str = ""

    def theta_cov(self, p: int) -> Optional[np.ndarray]:
        if self.cov is None:
            return None
        idx = slice(self.cov.shape[0] - p * p, None)
        block = self.cov[idx, idx]
        if not np.all(np.isfinite(block)) or np.any(np.diag(block) < 0):
            return None
        return block

    def as_dict(self) -> dict:
        return {
            n: {"estimate": float(e), "se": (float(s) if v else None), "valid": bool(v)}
            for n, e, s, v in zip(self.names, self.estimates, self.se, self.valid)
        }


@dataclass
class SigmaInterval:
    point: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    discard_rate: float
    draws: int


@dataclass
class FitResult:
    params: ModelParams
    spec: ModelSpec
    neg2_loglik: float
    block_iters: int
    converged: bool
    reason: str  # param-tol | loglik-tol | max-iters | failure
    trace: list
    message: str = ""
    se: Optional[SEResult] = None
    sigma_ci: Optional[SigmaInterval] = None
    config: FitConfig = field(default_factory=FitConfig)

    @property
    def usable(self) -> bool:
        """Converged or ran out of iterations; failures are excluded from summaries."""
        return self.reason != "failure"

    @property
    def theta_cov(self) -> Optional[np.ndarray]:
        return None if self.se is None else self.se.theta_cov(self.params.ou.p)

    def to_dict(self) -> dict:
        meas, ou = self.params.meas, self.params.ou
        out = {
            "outcomes": list(self.spec.outcomes),
            "factors": list(self.spec.factors),
            "loading_map": dict(self.spec.loading_map),
            "sign_anchors": dict(self.spec.sign_anchors),
            "params": {
                "loadings": meas.loadings.tolist(),
                "var_u": meas.var_u.tolist(),
                "var_eps": meas.var_eps.tolist(),
                "theta": ou.theta.tolist(),
                "sigma": ou.sigma_diag.tolist(),
            },
            "neg2_loglik": self.neg2_loglik,
            "block_iters": self.block_iters,
            "converged": self.converged,
            "reason": self.reason,
            "message": self.message,
            "trace": [float(v) for v in self.trace],
            "se": None if self.se is None else self.se.as_dict(),
            "theta_cov": None if self.theta_cov is None else self.theta_cov.tolist(),
            "sigma_ci": None,
            "config": asdict(self.config),
        }
        if self.sigma_ci is not None:
            out["sigma_ci"] = {
                "point": self.sigma_ci.point.tolist(),
                "lower": self.sigma_ci.lower.tolist(),
                "upper": self.sigma_ci.upper.tolist(),
                "discard_rate": self.sigma_ci.discard_rate,
                "draws": self.sigma_ci.draws,
            }
        return out


def default_ou(p: int) -> OUParams:
    """theta = I with off-diagonals 0.1, sigma giving unit stationary variance."""
    theta = np.full((p, p), 0.1)
    np.fill_diagonal(theta, 1.0)
    return OUParams.from_diag(theta, sigma_from_theta(theta))


def parameter_vector(params: ModelParams) -> np.ndarray:
    """All free parameters: lambda, var_u, var_eps, theta (row-major), sigma."""
    m, ou = params.meas, params.ou
    return np.concatenate([m.lam, m.var_u, m.var_eps, ou.theta.ravel(), ou.sigma_diag])


def apply_sign_convention(params: ModelParams, spec: ModelSpec) -> ModelParams:
    """Flip factors so each anchor outcome has a positive loading."""
    L = params.meas.loadings
    anchors = spec.anchor_index
    signs = np.where(L[anchors, np.arange(spec.p)] < 0, -1.0, 1.0)
    return params if np.all(signs > 0) else flip_signs(params, signs)


# ---------------------------------------------------------------- initialization

def _correlation(a: np.ndarray, p: int) -> np.ndarray:
    L = np.eye(p)
    L[np.tril_indices(p, -1)] = a
    C = L @ L.T
    d = 1.0 / np.sqrt(np.diag(C))
    return C * d[:, None] * d[None, :]


def cross_sectional_fit(S: np.ndarray, spec: ModelSpec):
    """ML factor analysis of a second-moment matrix with the structural zeros.

    Factor variances are fixed at one. Returns (lam, psi, Phi).
    """
    K, p = spec.K, spec.p
    f_of = spec.factor_of
    n_corr = p * (p - 1) // 2
    _, logdet_S = np.linalg.slogdet(S)

    def unpack(x):
        Lam = np.zeros((K, p))
        Lam[np.arange(K), f_of] = x[:K]
        return Lam, np.exp(x[K:2 * K]), _correlation(x[2 * K:], p)

    def discrepancy(x):
        Lam, psi, Phi = unpack(x)
        Sig = Lam @ Phi @ Lam.T + np.diag(psi)
        sign, logdet = np.linalg.slogdet(Sig)
        if sign <= 0:
            return np.inf
        return logdet + np.trace(np.linalg.solve(Sig, S)) - logdet_S - K

    d = np.diag(S)
    x0 = np.concatenate([np.sqrt(0.5 * d), np.log(0.5 * d), np.zeros(n_corr)])
    res = minimize(discrepancy, x0, method="BFGS", options={"gtol": 1e-7, "maxiter": 2000})
    return unpack(res.x)


def _random_intercept_fit(x: np.ndarray, y: np.ndarray, valid: np.ndarray):
    """ML for y = lam x + u_i + eps per outcome; returns (lam, var_u, var_eps)."""
    n = valid.sum(axis=1)
    x = np.where(valid, x, 0.0)
    y = np.where(valid, y, 0.0)
    Sx, Sy = x.sum(1), y.sum(1)
    Sxx, Syy, Sxy = (x * x).sum(1), (y * y).sum(1), (x * y).sum(1)

    def profile(z):
        a, b = np.exp(z)
        c = b / (a + n * b)
        xvy = np.sum(Sxy - c * Sx * Sy) / a
        xvx = np.sum(Sxx - c * Sx * Sx) / a
        lam = xvy / xvx
        rr = (Syy - 2 * lam * Sxy + lam * lam * Sxx - c * (Sy - lam * Sx) ** 2) / a
        logdet = (n - 1) * np.log(a) + np.log(a + n * b)
        return float(np.sum(logdet + rr)), lam

    v = np.var(y[valid])
    res = minimize(lambda z: profile(z)[0], np.log([0.5 * v + 1e-3, 0.5 * v + 1e-3]), method="Nelder-Mead",
                   options={"xatol": 1e-8, "fatol": 1e-10, "maxiter": 4000})
    _, lam = profile(res.x)
    a, b = np.exp(res.x)
    return float(lam), float(b), float(a)


def _pooled_rows(batch: PanelBatch) -> np.ndarray:
    return batch.Y[batch.valid]


def initialize_measurement(batch: PanelBatch, spec: ModelSpec, cfg: FitConfig):
    """Measurement starting values and regression factor scores (padded, (N, n_max, p))."""
    rows = _pooled_rows(batch)
    if rows.shape[0] < spec.K:
        raise DegenerateDataError("fewer pooled occasions than outcomes")
    S = rows.T @ rows / rows.shape[0]
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise DegenerateDataError("pooled covariance is not positive definite") from exc
    Lam, psi, Phi = cross_sectional_fit(S, spec)
    Sig = Lam @ Phi @ Lam.T + np.diag(psi)
    B = Phi @ Lam.T @ np.linalg.inv(Sig)  # regression scores: eta_hat = B y
    scores = np.einsum("ak,gjk->gja", B, batch.Y)

    floor = cfg.init_variance_floor
    lam, var_u, var_eps = np.zeros(spec.K), np.zeros(spec.K), np.zeros(spec.K)
    for k, j in enumerate(spec.factor_of):
        lam[k], var_u[k], var_eps[k] = _random_intercept_fit(scores[..., j], batch.Y[..., k], batch.valid)
    lam = np.where(lam < 0, -1.0, 1.0) * np.maximum(np.abs(lam), floor)
    meas = MeasurementParams.from_spec(spec, lam, np.maximum(var_u, floor), np.maximum(var_eps, floor))
    return meas, scores


def fit_ou_white_noise(score_panels, p: int, cfg: FitConfig) -> OUParams:
    """OU fit to factor scores with an added white-noise variance gamma."""
    mask = np.eye(p, dtype=bool)
    batch = as_batch(score_panels)

    def unpack(z):
        ou = OUParams.from_diag(z[:p * p].reshape(p, p), np.exp(z[p * p:p * p + p]))
        meas = MeasurementParams(np.eye(p), np.zeros(p), np.full(p, np.exp(2 * z[-1])), mask)
        return ModelParams(meas, ou)

    def f(z):
        return neg2_loglik_structured(unpack(z), batch)

    start = default_ou(p)
    gamma0 = 0.25 * float(np.mean(batch.Y[batch.valid] ** 2))
    z0 = np.concatenate([start.theta.ravel(), np.log(start.sigma_diag), [0.5 * np.log(max(gamma0, 1e-3))]])
    lower = np.full(z0.size, -np.inf)
    upper = np.full(z0.size, np.inf)
    diag = np.arange(p) * (p + 1)
    lower[diag] = cfg.theta_diag_lower
    upper[diag] = cfg.theta_init_diag_cap
    lower[-1] = 0.5 * np.log(cfg.variance_lower)
    res = minimize_bfgs(f, z0, lower=lower, upper=upper, gradtol=1e-6, steptol=1e-8,
                        max_step=cfg.max_step, max_iter=cfg.ou_max_iters)
    return unpack(res.x).ou


def initialize(data, spec: ModelSpec, cfg: Optional[FitConfig] = None, scores=None, return_info: bool = False):
    """Starting values: empirical measurement block plus the better of two OU starts.

    ``scores`` overrides the regression factor scores (padded (N, n_max, p)).
    """
    cfg = cfg or FitConfig()
    batch = as_batch(data)
    if batch.K != spec.K:
        raise ValueError(f"data has {batch.K} outcomes but the spec lists {spec.K}")
    meas, reg_scores = initialize_measurement(batch, spec, cfg)
    scores = reg_scores if scores is None else np.asarray(scores, dtype=float)
    panels = [SubjectPanel(sp.subject_id, sp.times, scores[i, :sp.n]) for i, sp in enumerate(batch.panels)]
    objective = cfg.objective()

    candidates = {"default": default_ou(spec.p)}
    try:
        candidates["empirical"] = fit_ou_white_noise(panels, spec.p, cfg)
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        log.info("empirical OU start failed: %s", exc)
    values = {k: safe_call(lambda ou: objective(ModelParams(meas, ou), batch), ou) for k, ou in candidates.items()}
    branch = min(values, key=lambda k: (values[k], k != "empirical"))
    params = identify(ModelParams(meas, candidates[branch]))
    if return_info:
        return params, {"branch": branch, "neg2_loglik": values}
    return params


# ---------------------------------------------------------------- block updates

def _tolerance(r: int) -> float:
    return max(1e-4 / 10.0**r, 1e-8)


def _carry(res):
    """Inverse Hessian worth warm-starting the next block with; curvature from a capped run is stale."""
    return res.inv_hess if res.reason in ("gradtol", "steptol") else None


def _measurement_block(params: ModelParams, batch, cfg: FitConfig, tol: float, inv_hess=None):
    meas, ou = params.meas, params.ou
    K = meas.K
    objective = cfg.objective()

    def unpack(x):
        return ModelParams(meas.with_free(x[:K], np.exp(2 * x[K:2 * K]), np.exp(2 * x[2 * K:])), ou)

    def f(x):
        return objective(unpack(x), batch)

    def fg(x):
        value, g = neg2_loglik_and_gradient(unpack(x), batch)
        return value, g.vector

    x0 = np.concatenate([meas.lam, 0.5 * np.log(meas.var_u), 0.5 * np.log(meas.var_eps)])
    lower = np.concatenate([np.full(K, -np.inf), np.full(2 * K, 0.5 * np.log(cfg.variance_lower))])
    x0 = np.maximum(x0, lower)
    res = minimize_bfgs(f, x0, grad=fg, lower=lower, gradtol=tol, steptol=tol, max_step=cfg.max_step,
                        max_iter=cfg.measurement_max_iters, inv_hess0=inv_hess)
    log.debug("measurement block: %d iterations, %d evaluations, %s, -2logL %.6f", res.n_iter, res.n_eval, res.reason, res.fun)
    return unpack(res.x), _carry(res)


def _ou_bounds(p: int, cfg: FitConfig):
    lower = np.full(p * p + p, -np.inf)
    upper = np.full(p * p + p, np.inf)
    lower[:p * p] = -cfg.theta_bound
    upper[:p * p] = cfg.theta_bound
    lower[np.arange(p) * (p + 1)] = cfg.theta_diag_lower
    return lower, upper


def _ou_block(params: ModelParams, batch, cfg: FitConfig, tol: float, inv_hess=None):
    meas, ou = params.meas, params.ou
    p = ou.p
    objective = cfg.objective()

    def unpack(z):
        return ModelParams(meas, OUParams.from_diag(z[:p * p].reshape(p, p), np.exp(z[p * p:])))

    def f(z):
        return objective(unpack(z), batch)

    z0 = np.concatenate([ou.theta.ravel(), np.log(ou.sigma_diag)])
    lower, upper = _ou_bounds(p, cfg)
    # rescaling can carry an off-diagonal past the cap; widen rather than move the start
    lower, upper = np.minimum(lower, z0), np.maximum(upper, z0)
    res = minimize_bfgs(f, z0, lower=lower, upper=upper, gradtol=tol, steptol=tol, max_step=cfg.max_step,
                        max_iter=cfg.ou_max_iters, inv_hess0=inv_hess)
    log.debug("ou block: %d iterations, %d evaluations, %s, -2logL %.6f", res.n_iter, res.n_eval, res.reason, res.fun)
    return unpack(res.x), _carry(res)


def block_coordinate_descent(data, spec: ModelSpec, start: ModelParams, cfg: Optional[FitConfig] = None) -> FitResult:
    """Alternate measurement and OU updates from ``start`` until convergence."""
    cfg = cfg or FitConfig()
    batch = as_batch(data)
    objective = cfg.objective()
    params = identify(start)
    value = safe_call(lambda m: objective(m, batch), params)
    if not np.isfinite(value):
        return FitResult(params, spec, value, 0, False, "failure", [], "likelihood not finite at the start", config=cfg)
    trace = [value]
    reason, message = "max-iters", ""
    r = 0
    H1 = H2 = None  # inverse Hessian approximations carried across iterations
    for r in range(1, cfg.max_block_iters + 1):
        tol = _tolerance(r)
        try:
            new, H1 = _measurement_block(params, batch, cfg, tol, H1)
            new, H2 = _ou_block(new, batch, cfg, tol, H2)
            new = identify(new)
            new_value = objective(new, batch)
        except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
            reason, message = "failure", f"block iteration {r}: {exc}"
            r -= 1
            break
        old_theta, new_theta = parameter_vector(params), parameter_vector(new)
        improvement = 0.5 * (value - new_value)
        params, value = new, new_value
        trace.append(value)
        rel = np.abs(new_theta - old_theta) / np.maximum(np.abs(new_theta), np.finfo(float).tiny)
        if np.all(rel < cfg.rel_param_tol):
            reason = "param-tol"
            break
        if improvement < cfg.loglik_tol:
            reason = "loglik-tol"
            break
    params = apply_sign_convention(params, spec)
    converged = reason in ("param-tol", "loglik-tol")
    return FitResult(params, spec, float(value), r, converged, reason, trace, message, config=cfg)


# ---------------------------------------------------------------- uncertainty

def se_parameter_names(spec: ModelSpec) -> list:
    p = spec.p
    names = [f"lambda[{o}]" for o in spec.outcomes]
    names += [f"sd_u[{o}]" for o in spec.outcomes]
    names += [f"sd_eps[{o}]" for o in spec.outcomes]
    names += [f"theta[{i + 1},{j + 1}]" for i in range(p) for j in range(p)]
    return names


def _reduced_vector(params: ModelParams) -> np.ndarray:
    m = params.meas
    return np.concatenate([m.lam, 0.5 * np.log(m.var_u), 0.5 * np.log(m.var_eps), params.ou.theta.ravel()])


def numerical_hessian(f, x: np.ndarray, rel_step: float) -> np.ndarray:
    """Central-difference Hessian with steps rel_step * (1 + |x|)."""
    m = x.size
    h = rel_step * (1.0 + np.abs(x))
    E = np.diag(h)
    f0 = f(x)
    H = np.zeros((m, m))
    fp = np.array([f(x + E[i]) for i in range(m)])
    fm = np.array([f(x - E[i]) for i in range(m)])
    for i in range(m):
        H[i, i] = (fp[i] - 2 * f0 + fm[i]) / h[i] ** 2
        for j in range(i + 1, m):
            v = (f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j]) + f(x - E[i] - E[j]))
            H[i, j] = H[j, i] = v / (4 * h[i] * h[j])
    return H


def standard_errors(params: ModelParams, data, spec: Optional[ModelSpec] = None,
                    cfg: Optional[FitConfig] = None) -> SEResult:
    """Inverse numerical Hessian of -log L with sigma eliminated through unit variance.

    Reported scale: loadings, standard deviations of u and eps (delta method) and theta.
    """
    cfg = cfg or FitConfig()
    batch = as_batch(data)
    meas, p, K = params.meas, params.ou.p, params.meas.K
    spec = spec or ModelSpec.from_assignment(meas.factor_of)
    objective = cfg.objective()

    def f(x):
        theta = x[3 * K:].reshape(p, p)
        try:
            ou = OUParams.from_diag(theta, sigma_from_theta(theta))
        except (ValueError, np.linalg.LinAlgError):
            return np.nan
        m = meas.with_free(x[:K], np.exp(2 * x[K:2 * K]), np.exp(2 * x[2 * K:3 * K]))
        return 0.5 * objective(ModelParams(m, ou), batch)

    x = _reduced_vector(params)
    names = se_parameter_names(spec)
    estimates = np.concatenate([meas.lam, np.sqrt(meas.var_u), np.sqrt(meas.var_eps), params.ou.theta.ravel()])
    H = numerical_hessian(f, x, cfg.hessian_step)
    m = x.size
    if not np.all(np.isfinite(H)):
        return SEResult(names, estimates, np.full(m, np.nan), np.zeros(m, bool), None, H,
                        "Hessian has non-finite entries")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", RuntimeWarning)
            cov = np.linalg.inv(H)
        if np.linalg.cond(H) > 1e14:
            raise np.linalg.LinAlgError("Hessian is numerically singular")
    except (np.linalg.LinAlgError, RuntimeWarning) as exc:
        return SEResult(names, estimates, np.full(m, np.nan), np.zeros(m, bool), None, H, str(exc))
    cov = 0.5 * (cov + cov.T)
    var = np.diag(cov)
    valid = var > 0
    se = np.where(valid, np.sqrt(np.where(valid, var, 1.0)), np.nan)
    se[K:3 * K] *= estimates[K:3 * K]  # d sd / d log sd = sd
    message = "" if valid.all() else "negative variance for " + ", ".join(np.array(names)[~valid])
    return SEResult(names, estimates, se, valid, cov, H, message)


def bootstrap_ou_draws(theta_hat, theta_cov, draws: int, seed=None):
    """Valid (theta, sigma) pairs from theta ~ N(theta_hat, cov); returns (thetas, sigmas, discard_rate)."""
    theta_hat = np.atleast_2d(np.asarray(theta_hat, dtype=float))
    p = theta_hat.shape[0]
    cov = np.asarray(theta_cov, dtype=float).reshape(p * p, p * p)
    cov = 0.5 * (cov + cov.T)
    if np.any(np.linalg.eigvalsh(cov) < -1e-10 * max(1.0, np.abs(cov).max())):
        raise ValueError("theta covariance is not positive semi-definite")
    rng = np.random.default_rng(seed)
    raw = rng.multivariate_normal(theta_hat.ravel(), cov, size=draws, method="eigh")
    thetas, sigmas = [], []
    for row in raw:
        theta = row.reshape(p, p)
        try:
            sigma = sigma_from_theta(theta)
            OUParams.from_diag(theta, sigma)
        except (InvalidDriftError, ValueError, np.linalg.LinAlgError):
            continue
        thetas.append(theta)
        sigmas.append(sigma)
    discard = 1.0 - len(thetas) / draws
    if discard > 0.5:
        warnings.warn(f"{discard:.0%} of bootstrap draws were invalid", RuntimeWarning, stacklevel=2)
    return np.array(thetas).reshape(-1, p, p), np.array(sigmas).reshape(-1, p), discard


def bootstrap_sigma(theta_hat, theta_cov, draws: int = 1000, seed=None) -> SigmaInterval:
    """Percentile intervals (2.5%, 97.5%) for sigma as a function of theta."""
    theta_hat = np.atleast_2d(np.asarray(theta_hat, dtype=float))
    point = sigma_from_theta(theta_hat)
    _, sigmas, discard = bootstrap_ou_draws(theta_hat, theta_cov, draws, seed)
    if sigmas.shape[0] == 0:
        nan = np.full(point.size, np.nan)
        return SigmaInterval(point, nan, nan, discard, draws)
    lower, upper = np.percentile(sigmas, [2.5, 97.5], axis=0)
    return SigmaInterval(point, lower, upper, discard, draws)


@dataclass
class DecayCurves:
    gaps: np.ndarray
    point: np.ndarray  # (G, p, p): Corr{eta_i(s), eta_j(s + gap)}
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None
    discard_rate: Optional[float] = None


def default_gap_grid(ou: OUParams, n_points: int = 200) -> np.ndarray:
    """0 to five times the slowest half-life."""
    return np.linspace(0.0, 5.0 * float(np.max(half_lives(ou))), n_points)


def decay_curves(ou: OUParams, gaps=None, theta_cov=None, draws: int = 1000, seed=None) -> DecayCurves:
    """Auto- and cross-correlation decay with parametric bootstrap percentile bands."""
    gaps = default_gap_grid(ou) if gaps is None else np.asarray(gaps, dtype=float)
    point = correlation_decay(ou, gaps)
    if theta_cov is None:
        return DecayCurves(gaps, point)
    thetas, sigmas, discard = bootstrap_ou_draws(ou.theta, theta_cov, draws, seed)
    if thetas.shape[0] == 0:
        return DecayCurves(gaps, point, discard_rate=discard)
    curves = np.array([correlation_decay(OUParams.from_diag(t, s), gaps) for t, s in zip(thetas, sigmas)])
    lower, upper = np.percentile(curves, [2.5, 97.5], axis=0)
    return DecayCurves(gaps, point, lower, upper, discard)


def fit(data, spec: ModelSpec, cfg: Optional[FitConfig] = None, start: Optional[ModelParams] = None) -> FitResult:
    """Initialize (unless ``start`` is given), run block coordinate descent, then SEs and the sigma bootstrap."""
    cfg = cfg or FitConfig()
    batch = as_batch(data)
    if batch.K != spec.K:
        raise ValueError(f"data has {batch.K} outcomes but the spec lists {spec.K}")
    if start is None:
        start = initialize(batch, spec, cfg)
    result = block_coordinate_descent(batch, spec, start, cfg)
    if result.reason == "failure":
        return result
    if cfg.compute_se:
        result.se = standard_errors(result.params, batch, spec, cfg)
        cov = result.theta_cov
        if cfg.bootstrap and cov is not None:
            try:
                result.sigma_ci = bootstrap_sigma(result.params.ou.theta, cov, cfg.bootstrap_draws, cfg.seed)
            except ValueError as exc:
                result.message = (result.message + "; " if result.message else "") + f"bootstrap skipped: {exc}"
    return result
