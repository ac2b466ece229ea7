"""Simulation designs, the truth catalog and Monte Carlo replication runners."""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .estimation import FitConfig, FitResult, fit, apply_sign_convention, se_parameter_names
from .measurement import MeasurementParams, ModelParams, ModelSpec, SubjectPanel, assemble_sigma_star, identify
from .ou import OUParams
from .selection import select

__all__ = [
    "SimDesign",
    "TRUTHS",
    "Truth",
    "candidate_specs",
    "generate_dataset",
    "target_params",
    "reported_vector",
    "RecoveryTable",
    "replicate_recovery",
    "SelectionSummary",
    "replicate_selection",
]

_LAM = (1.2, 1.8, -0.4, 2.0)
_VAR_U = (1.1, 1.3, 1.4, 0.9)
_VAR_EPS = (0.6, 0.5, 0.4, 0.7)

# factor index of each of the four outcomes for 1, 2 and 3 factor models
_ASSIGNMENTS = {1: (0, 0, 0, 0), 2: (0, 0, 1, 1), 3: (0, 0, 1, 2)}


def _spec(p: int) -> ModelSpec:
    """Four-outcome structure; each factor is anchored on its first positively loading outcome."""
    base = ModelSpec.from_assignment(_ASSIGNMENTS[p])
    anchors = {}
    for f in base.factors:
        members = [k for k, o in enumerate(base.outcomes) if base.loading_map[o] == f]
        pos = [k for k in members if _LAM[k] > 0]
        anchors[f] = base.outcomes[(pos or members)[0]]
    return ModelSpec(base.outcomes, base.factors, base.loading_map, anchors)


def candidate_specs(max_factors: int = 3) -> list:
    return [_spec(p) for p in range(1, max_factors + 1)]


@dataclass(frozen=True)
class Truth:
    name: str
    spec: ModelSpec
    params: ModelParams


def _truth(name, p, theta, sigma) -> Truth:
    spec = _spec(p)
    meas = MeasurementParams.from_spec(spec, _LAM, _VAR_U, _VAR_EPS)
    return Truth(name, spec, ModelParams(meas, OUParams.from_diag(np.atleast_2d(theta), np.atleast_1d(sigma))))


TRUTHS = {
    t.name: t
    for t in (
        _truth("setting1", 2, [[1, 0.6], [4, 5]], [1, 2]),
        _truth("setting2", 2, [[1.0, 0.4], [1.8, 3.0]], [1.25, 2.00]),
        _truth("setting3", 2, [[1, 0.5], [2, 5]], [2, 3]),
        _truth("one_factor", 1, [[0.8]], [1.0]),
        _truth("two_factor_low", 2, [[2, 0.5], [0.4, 4]], [2, 1]),
        _truth("two_factor_high", 2, [[1, 1.5], [2, 5]], [2, 3]),
        _truth("three_factor_low", 3, [[2, 0.2, 0.4], [0.8, 1.1, 0.5], [0.7, 0.5, 1.2]], [1.2, 0.8, 0.4]),
        _truth("three_factor_high", 3, [[1, 0.4, 0.6], [1.8, 3, 0.9], [0.9, 1, 1.2]], [1.2, 0.8, 0.4]),
    )
}
SETTING_NAMES = {"1": "setting1", "2": "setting2", "3": "setting3"}


@dataclass(frozen=True)
class SimDesign:
    truth: ModelParams
    N: int = 200
    n_range: tuple = (10, 20)
    gap_range: tuple = (0.1, 2.0)
    seed: Optional[int] = None

    def __post_init__(self):
        lo, hi = self.n_range
        if self.N < 1 or lo < 1 or hi < lo:
            raise ValueError("need N >= 1 and 1 <= n_min <= n_max")
        a, b = self.gap_range
        if not 0 < a <= b:
            raise ValueError("gap range needs 0 < lower <= upper")


def generate_dataset(design: SimDesign, rng=None) -> list:
    """Subjects with t_1 = 0, integer n_i and uniform gaps; Y_i drawn exactly from N(0, Sigma*_i)."""
    rng = np.random.default_rng(design.seed) if rng is None else rng
    K = design.truth.meas.K
    width = len(str(design.N))
    panels = []
    for i in range(design.N):
        n = int(rng.integers(design.n_range[0], design.n_range[1] + 1))
        t = np.concatenate([[0.0], np.cumsum(rng.uniform(*design.gap_range, size=n - 1))])
        L = np.linalg.cholesky(assemble_sigma_star(design.truth, t))
        y = L @ rng.standard_normal(n * K)
        panels.append(SubjectPanel(f"s{i + 1:0{width}d}", t, y.reshape(n, K)))
    return panels


def target_params(truth: ModelParams, spec: Optional[ModelSpec] = None) -> ModelParams:
    """Parameters in the unit-variance scale the estimator targets (sign convention of ``spec``)."""
    target = identify(truth)
    return apply_sign_convention(target, spec) if spec is not None else target


def reported_names(spec: ModelSpec) -> list:
    return se_parameter_names(spec) + [f"sigma[{j + 1}]" for j in range(spec.p)]


def reported_vector(params: ModelParams) -> np.ndarray:
    """lambda, sd_u, sd_eps, theta (row-major), sigma."""
    m, ou = params.meas, params.ou
    return np.concatenate([m.lam, np.sqrt(m.var_u), np.sqrt(m.var_eps), ou.theta.ravel(), ou.sigma_diag])


def _child_seeds(seed, n):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(n)]


def _map(func, args, workers):
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(func, args))
    return [func(a) for a in args]


@dataclass
class RecoveryTable:
    names: list
    target: np.ndarray
    estimates: np.ndarray  # (R, m), nan rows for failed replicates
    ses: np.ndarray  # (R, m), nan where missing or invalid
    se_invalid: np.ndarray  # (R, m) flags for replicates whose SE was flagged invalid
    reasons: list
    monotone: list  # trace non-increasing per replicate

    @property
    def usable(self) -> np.ndarray:
        return np.array([r != "failure" for r in self.reasons])

    def summary(self) -> list:
        est = self.estimates[self.usable]
        R = est.shape[0]
        rows = []
        for j, name in enumerate(self.names):
            col = est[:, j]
            mean = float(np.mean(col))
            sd = float(np.std(col, ddof=1)) if R > 1 else float("nan")
            se_col = self.ses[self.usable, j]
            ok = np.isfinite(se_col)
            mean_se = float(np.mean(se_col[ok])) if ok.any() else float("nan")
            rows.append({
                "parameter": name,
                "target": float(self.target[j]),
                "mean": mean,
                "bias": mean - float(self.target[j]),
                "empirical_sd": sd,
                "mcse": sd / np.sqrt(R) if R > 1 else float("nan"),
                "mean_se": mean_se,
                "se_sd_ratio": mean_se / sd if R > 1 else float("nan"),
                "n_used": int(R),
                "n_se_invalid": int(self.se_invalid[self.usable, j].sum()),
            })
        return rows

    def convergence_counts(self) -> dict:
        out = {}
        for r in self.reasons:
            out[r] = out.get(r, 0) + 1
        return out

    def to_csv(self) -> str:
        rows = self.summary()
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()


def _recovery_one(args):
    design, spec, cfg, seed = args
    data = generate_dataset(replace(design, seed=seed))
    try:
        res = fit(data, spec, replace(cfg, seed=seed))
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return None, str(exc)
    return res, ""


def replicate_recovery(design: SimDesign, spec: ModelSpec, n_replicates: int, cfg: Optional[FitConfig] = None,
                       workers: int = 1) -> RecoveryTable:
    if n_replicates < 2:
        raise ValueError("need at least two replicates")
    cfg = cfg or FitConfig()
    names = reported_names(spec)
    target = reported_vector(target_params(design.truth, spec))
    seeds = _child_seeds(design.seed, n_replicates)
    results = _map(_recovery_one, [(design, spec, cfg, s) for s in seeds], workers)
    m = len(names)
    n_se = m - spec.p
    est = np.full((n_replicates, m), np.nan)
    ses = np.full((n_replicates, m), np.nan)
    invalid = np.zeros((n_replicates, m), dtype=bool)
    reasons, monotone = [], []
    for r, (res, _) in enumerate(results):
        if res is None or res.reason == "failure":
            reasons.append("failure")
            monotone.append(True)
            continue
        reasons.append(res.reason)
        monotone.append(bool(np.all(np.diff(res.trace) <= 1e-8 * np.abs(res.trace[1:]))))
        est[r] = reported_vector(res.params)
        if res.se is not None:
            ses[r, :n_se] = res.se.se
            invalid[r, :n_se] = ~res.se.valid
    return RecoveryTable(names, target, est, ses, invalid, reasons, monotone)


@dataclass
class SelectionSummary:
    truth: str
    candidates: list  # factor counts
    winners_aic: list  # per replicate, None when unusable
    winners_bic: list
    usable: list
    reports: list = field(default_factory=list, repr=False)

    def percentages(self, metric: str) -> dict:
        winners = self.winners_aic if metric == "aic" else self.winners_bic
        used = [w for w, u in zip(winners, self.usable) if u]
        n = len(used)
        return {p: (100.0 * sum(w == p for w in used) / n if n else float("nan")) for p in self.candidates}

    @property
    def n_usable(self) -> int:
        return int(sum(self.usable))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["truth", "metric", "fitted_factors", "percent", "n_usable"])
        for metric in ("aic", "bic"):
            for p, pct in self.percentages(metric).items():
                w.writerow([self.truth, metric, p, f"{pct:.1f}", self.n_usable])
        return buf.getvalue()


def _selection_one(args):
    truth, specs, cfg, N, seed = args
    data = generate_dataset(SimDesign(truth.params, N=N, seed=seed))
    return select(data, specs, replace(cfg, seed=seed))


def replicate_selection(truth_name: str, n_replicates: int, cfg: Optional[FitConfig] = None, seed=None,
                        N: int = 200, max_factors: int = 3, workers: int = 1) -> SelectionSummary:
    """Fit 1..max_factors candidates per replicate and tabulate AIC/BIC winners.

    A replicate is usable when every candidate converged or reached the iteration cap.
    """
    if truth_name not in TRUTHS:
        raise KeyError(f"unknown truth {truth_name!r}; choose from {sorted(TRUTHS)}")
    if n_replicates < 1:
        raise ValueError("need at least one replicate")
    cfg = cfg or FitConfig()
    truth = TRUTHS[truth_name]
    specs = candidate_specs(max_factors)
    seeds = _child_seeds(seed, n_replicates)
    reports = _map(_selection_one, [(truth, specs, cfg, N, s) for s in seeds], workers)
    usable = [all(c.usable for c in rep.candidates) for rep in reports]
    return SelectionSummary(
        truth_name,
        [s.p for s in specs],
        [rep.winner_aic if u else None for rep, u in zip(reports, usable)],
        [rep.winner_bic if u else None for rep, u in zip(reports, usable)],
        usable,
        reports,
    )
