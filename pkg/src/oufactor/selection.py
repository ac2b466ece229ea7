"""Information criteria with one constraint per factor, and a candidate comparison runner.

The BIC penalty keeps the leading factor 2, 2 log(N) (q - p), rather than the
conventional log(N) (q - p).
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .estimation import FitConfig, FitResult, fit
from .measurement import ModelSpec, as_batch

__all__ = ["aic", "bic", "count_free_params", "CandidateFit", "SelectionReport", "select"]


def aic(neg2_loglik: float, q: int, p: int) -> float:
    if not q > p >= 1:
        raise ValueError("need q > p >= 1")
    return 2.0 * (q - p) + neg2_loglik


def bic(neg2_loglik: float, q: int, p: int, n_subjects: int) -> float:
    if not q > p >= 1:
        raise ValueError("need q > p >= 1")
    if n_subjects < 1:
        raise ValueError("need at least one subject")
    return 2.0 * np.log(n_subjects) * (q - p) + neg2_loglik


def count_free_params(spec: ModelSpec):
    """(q, p): nonzero entries of Lambda, Sigma_u, Sigma_eps, theta and sigma; p constraints."""
    K, p = spec.K, spec.p
    return 3 * K + p * p + p, p


@dataclass
class CandidateFit:
    p: int
    q: int
    neg2_loglik: float
    aic: float
    bic: float
    converged: bool
    reason: str

    @property
    def usable(self) -> bool:
        return self.reason != "failure"


@dataclass
class SelectionReport:
    candidates: list
    winner_aic: Optional[int]
    winner_bic: Optional[int]
    n_subjects: int
    fits: list = None  # FitResult per candidate, not serialized

    def to_csv(self) -> str:
        buf = io.StringIO()
        fields = ["p", "q", "neg2_loglik", "aic", "bic", "converged", "reason"]
        w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
        w.writeheader()
        for c in self.candidates:
            row = asdict(c)
            for k in ("neg2_loglik", "aic", "bic"):
                row[k] = repr(float(row[k]))
            w.writerow(row)
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "winner_aic": self.winner_aic,
            "winner_bic": self.winner_bic,
            "candidates": [asdict(c) for c in self.candidates],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, allow_nan=True)


def _winner(cands, key):
    usable = [c for c in cands if c.usable and np.isfinite(getattr(c, key))]
    if not usable:
        return None
    # ties go to the smaller model
    return min(usable, key=lambda c: (getattr(c, key), c.p, c.q - c.p)).p


def rank_candidates(candidates: Sequence[CandidateFit]):
    """(AIC winner, BIC winner) among usable candidates."""
    return _winner(candidates, "aic"), _winner(candidates, "bic")


def select(data, candidate_specs: Sequence[ModelSpec], cfg: Optional[FitConfig] = None,
           fits: Optional[Sequence[FitResult]] = None) -> SelectionReport:
    """Fit each candidate and compare by AIC and BIC.

    Candidates that hit the iteration cap are still compared; failed fits are not.
    """
    if not candidate_specs:
        raise ValueError("need at least one candidate")
    batch = as_batch(data)
    cfg = replace(cfg or FitConfig(), compute_se=False, bootstrap=False)
    if fits is None:
        fits = []
        for spec in candidate_specs:
            try:
                fits.append(fit(batch, spec, cfg))
            except (ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
                fits.append(FitResult(None, spec, np.inf, 0, False, "failure", [], str(exc), config=cfg))
    rows = []
    for spec, res in zip(candidate_specs, fits):
        q, p = count_free_params(spec)
        value = res.neg2_loglik if res.usable else np.inf
        rows.append(CandidateFit(p, q, float(value), aic(value, q, p), bic(value, q, p, batch.N),
                                 res.converged, res.reason))
    wa, wb = rank_candidates(rows)
    return SelectionReport(rows, wa, wb, batch.N, list(fits))
