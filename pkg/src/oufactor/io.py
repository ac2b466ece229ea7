"""Panel CSV, spec JSON and parameter serialization."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .measurement import MeasurementParams, ModelParams, ModelSpec, SubjectPanel
from .ou import OUParams

__all__ = [
    "ParseError",
    "read_panel_csv",
    "write_panel_csv",
    "SpecFile",
    "read_spec_json",
    "spec_to_dict",
    "params_to_dict",
    "params_from_dict",
    "read_fit_json",
    "write_json",
]


class ParseError(ValueError):
    """Malformed input file; the message names the file and, when known, the line."""


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_panel_csv(path, panels: Sequence[SubjectPanel], outcomes: Sequence[str]) -> None:
    """Wide format: subject_id, time, then one column per outcome."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subject_id", "time", *outcomes])
        for sp in panels:
            for t, row in zip(sp.times, sp.Y):
                w.writerow([sp.subject_id, _fmt(t), *(_fmt(v) for v in row)])


def read_panel_csv(path, outcomes: Optional[Sequence[str]] = None) -> list:
    """Parse a wide panel file; ``outcomes`` selects and orders the outcome columns."""
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise ParseError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header:
            raise ParseError(f"{path}: empty file")
        header = [h.strip() for h in header]
        if header[:2] != ["subject_id", "time"]:
            raise ParseError(f"{path}:1: header must start with subject_id,time")
        available = header[2:]
        if not available:
            raise ParseError(f"{path}:1: no outcome columns")
        if outcomes is None:
            outcomes = available
        missing = [o for o in outcomes if o not in available]
        if missing:
            raise ParseError(f"{path}:1: missing outcome columns {missing}")
        cols = [header.index(o) for o in outcomes]

        order, rows = [], {}
        last = None
        for line_no, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise ParseError(f"{path}:{line_no}: expected {len(header)} fields, found {len(rec)}")
            sid = rec[0].strip()
            try:
                t = float(rec[1])
                y = [float(rec[c]) for c in cols]
            except ValueError as exc:
                raise ParseError(f"{path}:{line_no}: {exc}") from exc
            if not (np.isfinite(t) and np.all(np.isfinite(y))):
                raise ParseError(f"{path}:{line_no}: missing or non-finite value")
            if sid != last:
                if sid in rows:
                    raise ParseError(f"{path}:{line_no}: rows for subject {sid!r} are not contiguous")
                rows[sid] = ([], [])
                order.append(sid)
                last = sid
            times, ys = rows[sid]
            if times and t <= times[-1]:
                raise ParseError(f"{path}:{line_no}: times for subject {sid!r} must strictly increase")
            times.append(t)
            ys.append(y)
    if not order:
        raise ParseError(f"{path}: no data rows")
    return [SubjectPanel(sid, np.array(rows[sid][0]), np.array(rows[sid][1])) for sid in order]


def params_to_dict(params: ModelParams) -> dict:
    m, ou = params.meas, params.ou
    return {
        "loadings": m.loadings.tolist(),
        "var_u": m.var_u.tolist(),
        "var_eps": m.var_eps.tolist(),
        "theta": ou.theta.tolist(),
        "sigma": ou.sigma_diag.tolist(),
    }


def params_from_dict(d: dict, spec: ModelSpec) -> ModelParams:
    """Loadings may be the full K x p matrix or the K free values in outcome order."""
    lam = np.asarray(d["loadings"], dtype=float)
    if lam.ndim == 2:
        if lam.shape != (spec.K, spec.p):
            raise ValueError(f"loadings must be {spec.K}x{spec.p}")
        if np.any(lam[~spec.mask] != 0):
            raise ValueError("loadings have nonzero entries outside the spec's structure")
        lam = lam[np.arange(spec.K), spec.factor_of]
    meas = MeasurementParams.from_spec(spec, lam, d["var_u"], d["var_eps"])
    theta = np.atleast_2d(np.asarray(d["theta"], dtype=float))
    return ModelParams(meas, OUParams.from_diag(theta, np.atleast_1d(np.asarray(d["sigma"], dtype=float))))


def spec_to_dict(spec: ModelSpec) -> dict:
    return {
        "outcomes": list(spec.outcomes),
        "factors": list(spec.factors),
        "loading_map": dict(spec.loading_map),
        "sign_anchors": dict(spec.sign_anchors),
    }


class SpecFile:
    """Parsed spec JSON: structure, fit config overrides and optional truth."""

    def __init__(self, spec: ModelSpec, fit_config: dict, truth: Optional[ModelParams]):
        self.spec = spec
        self.fit_config = fit_config
        self.truth = truth


def read_spec_json(path) -> SpecFile:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ParseError(f"{path}: cannot open ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    try:
        spec = ModelSpec(tuple(doc["outcomes"]), tuple(doc["factors"]), dict(doc["loading_map"]),
                         dict(doc.get("sign_anchors", {})))
        truth = params_from_dict(doc["truth"], spec) if doc.get("truth") else None
    except KeyError as exc:
        raise ParseError(f"{path}: missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ParseError(f"{path}: {exc}") from exc
    cfg = doc.get("fit_config", {})
    if not isinstance(cfg, dict):
        raise ParseError(f"{path}: fit_config must be an object")
    return SpecFile(spec, cfg, truth)


def read_fit_json(path):
    """(spec, params, theta_cov or None) from a fit result document."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
        spec = ModelSpec(tuple(doc["outcomes"]), tuple(doc["factors"]), dict(doc["loading_map"]),
                         dict(doc.get("sign_anchors", {})))
        params = params_from_dict(doc["params"], spec)
    except OSError as exc:
        raise ParseError(f"{path}: cannot open ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: not a fit result ({exc})") from exc
    cov = doc.get("theta_cov")
    return spec, params, (None if cov is None else np.asarray(cov, dtype=float))


def write_json(path, doc: dict) -> None:
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
