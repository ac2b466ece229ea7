"""Command-line entry point: simulate, fit, select, autocorr, replicate."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .estimation import DegenerateDataError, FitConfig, decay_curves, default_gap_grid, fit
from .linalg import IndefiniteMatrixError
from .measurement import ModelSpec
from .ou import InvalidDriftError
from .selection import count_free_params, select
from .simulation import SETTING_NAMES, TRUTHS, SimDesign, generate_dataset, replicate_recovery, replicate_selection, target_params

EXIT_OK, EXIT_USAGE, EXIT_NUMERICAL = 0, 1, 2
THREADS_ENV = "OUFACTOR_THREADS"

log = logging.getLogger("oufactor")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be at least 1")
    return v


def _config(overrides: dict, args) -> FitConfig:
    known = {f.name for f in dataclasses.fields(FitConfig)}
    unknown = set(overrides) - known
    if unknown:
        raise UsageError(f"unknown fit_config keys: {sorted(unknown)}")
    cfg = FitConfig(**overrides)
    updates = {}
    if getattr(args, "max_iters", None) is not None:
        updates["max_block_iters"] = args.max_iters
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "no_bootstrap", False):
        updates["bootstrap"] = False
    if getattr(args, "dense_likelihood", False):
        updates["dense_likelihood"] = True
    if getattr(args, "draws", None) is not None:
        updates["bootstrap_draws"] = args.draws
    return dataclasses.replace(cfg, **updates)


def _workers(args) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get(THREADS_ENV, "1"))


def _truth_for(name: str):
    key = SETTING_NAMES.get(name, name)
    if key not in TRUTHS:
        raise UsageError(f"unknown setting {name!r}; choose from 1, 2, 3 or {sorted(TRUTHS)}")
    return TRUTHS[key]


def write_decay_csv(path, curves, factors) -> None:
    p = curves.point.shape[-1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        bands = curves.lower is not None
        w.writerow(["gap", "factor_i", "factor_j", "correlation"] + (["lower", "upper"] if bands else []))
        for g, gap in enumerate(curves.gaps):
            for i in range(p):
                for j in range(p):
                    row = [format(gap, ".17g"), factors[i], factors[j], format(curves.point[g, i, j], ".17g")]
                    if bands:
                        row += [format(curves.lower[g, i, j], ".17g"), format(curves.upper[g, i, j], ".17g")]
                    w.writerow(row)


def _read_panels(path, spec):
    """Panel file whose outcome columns are exactly the spec's (any order)."""
    panels = io.read_panel_csv(path, spec.outcomes)
    with open(path, newline="") as fh:
        header = [h.strip() for h in next(csv.reader(fh))][2:]
    if sorted(header) != sorted(spec.outcomes):
        raise UsageError(f"{path}: outcome columns {header} do not match the spec's {list(spec.outcomes)} "
                         f"(K = {len(header)} vs {spec.K})")
    return panels


def cmd_simulate(args) -> int:
    if (args.setting is None) == (args.truth_file is None):
        raise UsageError("give exactly one of --setting or --truth-file")
    if args.setting is not None:
        truth = _truth_for(args.setting)
        spec, params, name = truth.spec, truth.params, truth.name
        if args.spec is not None:
            user = io.read_spec_json(args.spec).spec
            if (user.K, user.p) != (spec.K, spec.p) or not np.array_equal(user.mask, spec.mask):
                raise UsageError(f"{args.spec}: structure does not match setting {args.setting}")
            spec = user
    else:
        sf = io.read_spec_json(args.truth_file)
        if sf.truth is None:
            raise UsageError(f"{args.truth_file}: no truth section")
        spec, params, name = sf.spec, sf.truth, None
    design = SimDesign(params, N=args.n_subjects, n_range=tuple(args.n_range), gap_range=tuple(args.gap_range),
                       seed=args.seed)
    panels = generate_dataset(design)
    io.write_panel_csv(args.out, panels, spec.outcomes)
    truth_out = args.truth_out or str(Path(args.out).with_suffix(".truth.json"))
    io.write_json(truth_out, {
        **io.spec_to_dict(spec),
        "setting": name,
        "seed": args.seed,
        "n_subjects": args.n_subjects,
        "generating": io.params_to_dict(params),
        "target": io.params_to_dict(target_params(params, spec)),
    })
    log.info("wrote %d subjects to %s and truth to %s", len(panels), args.out, truth_out)
    return EXIT_OK


def cmd_fit(args) -> int:
    sf = io.read_spec_json(args.spec)
    cfg = _config(sf.fit_config, args)
    panels = _read_panels(args.data, sf.spec)
    result = fit(panels, sf.spec, cfg)
    doc = result.to_dict()
    doc["seed"] = cfg.seed
    io.write_json(args.out, doc)
    if result.reason == "failure":
        log.error("fit failed: %s", result.message)
        return EXIT_NUMERICAL
    log.info("fit %s after %d block iterations, -2logL %.6f", result.reason, result.block_iters, result.neg2_loglik)
    decay_out = args.decay_out or str(Path(args.out).with_suffix(".decay.csv"))
    cov = result.theta_cov if cfg.bootstrap else None
    curves = decay_curves(result.params.ou, theta_cov=cov, draws=cfg.bootstrap_draws, seed=cfg.seed)
    write_decay_csv(decay_out, curves, sf.spec.factors)
    return EXIT_OK


def cmd_select(args) -> int:
    files = [io.read_spec_json(p) for p in args.spec]
    outcomes = set(files[0].spec.outcomes)
    for p, sf in zip(args.spec, files):
        if set(sf.spec.outcomes) != outcomes:
            raise UsageError(f"{p}: outcome set differs from {args.spec[0]}")
    cfg = _config(files[0].fit_config, args)
    panels = _read_panels(args.data, files[0].spec)
    specs = []
    for sf in files:  # align every candidate to the first file's column order
        s = sf.spec
        order = files[0].spec.outcomes
        specs.append(ModelSpec(order, s.factors, s.loading_map, s.sign_anchors))
    report = select(panels, specs, cfg)
    for spec, cand in zip(specs, report.candidates):
        assert (cand.q, cand.p) == count_free_params(spec)
    text = report.to_json() if str(args.out).endswith(".json") else report.to_csv()
    Path(args.out).write_text(text)
    if report.winner_aic is None:
        log.error("every candidate failed")
        return EXIT_NUMERICAL
    log.info("AIC picks %d factors, BIC picks %d", report.winner_aic, report.winner_bic)
    return EXIT_OK


def cmd_autocorr(args) -> int:
    spec, params, cov = io.read_fit_json(args.fit)
    if cov is None:
        log.warning("%s has no theta covariance; writing the curve without bands", args.fit)
    if args.max_gap is not None:
        gaps = np.linspace(0.0, args.max_gap, args.n_gaps)
    else:
        gaps = default_gap_grid(params.ou, args.n_gaps)
    curves = decay_curves(params.ou, gaps, cov, args.draws, args.seed)
    write_decay_csv(args.out, curves, spec.factors)
    return EXIT_OK


def cmd_replicate(args) -> int:
    if args.reps < 1:
        raise UsageError("--reps must be at least 1")
    cfg = _config({}, args)
    if args.mode == "recovery":
        if args.reps < 2:
            raise UsageError("recovery needs at least 2 replicates")
        truth = _truth_for(args.setting)
        design = SimDesign(truth.params, N=args.n_subjects, seed=args.seed)
        table = replicate_recovery(design, truth.spec, args.reps, cfg, workers=_workers(args))
        Path(args.out).write_text(table.to_csv())
        log.info("replicates by outcome: %s", table.convergence_counts())
    else:
        truth = _truth_for(args.setting)
        summary = replicate_selection(truth.name, args.reps, cfg, seed=args.seed, N=args.n_subjects,
                                      workers=_workers(args))
        Path(args.out).write_text(summary.to_csv())
        log.info("%d of %d replicates usable", summary.n_usable, args.reps)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="oufactor", description="Ornstein-Uhlenbeck factor models for intensive longitudinal data.")
    parser.add_argument("--threads", type=_positive_int, default=None,
                        help=f"worker cap for replicate runs (default ${THREADS_ENV} or 1)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="draw a panel dataset")
    p.add_argument("--spec", help="spec JSON (names; optional with --setting)")
    p.add_argument("--setting", help="catalog truth: 1, 2, 3 or a selection truth name")
    p.add_argument("--truth-file", help="spec JSON with a truth section")
    p.add_argument("--n-subjects", type=_positive_int, default=200)
    p.add_argument("--n-range", type=int, nargs=2, default=(10, 20), metavar=("MIN", "MAX"))
    p.add_argument("--gap-range", type=float, nargs=2, default=(0.1, 2.0), metavar=("MIN", "MAX"))
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="panel CSV")
    p.add_argument("--truth-out", help="truth JSON (default: <out>.truth.json)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit one model")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True, help="fit result JSON")
    p.add_argument("--decay-out", help="correlation decay CSV (default: <out>.decay.csv)")
    p.add_argument("--max-iters", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--draws", type=_positive_int)
    p.add_argument("--no-bootstrap", action="store_true")
    p.add_argument("--dense-likelihood", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("select", help="compare factor structures by AIC and BIC")
    p.add_argument("--data", required=True)
    p.add_argument("--spec", required=True, nargs="+")
    p.add_argument("--out", required=True, help="report path (.json for JSON, otherwise CSV)")
    p.add_argument("--max-iters", type=_positive_int)
    p.add_argument("--seed", type=int)
    p.add_argument("--dense-likelihood", action="store_true")
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("autocorr", help="correlation decay curves from a fit result")
    p.add_argument("--fit", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-gap", type=float)
    p.add_argument("--n-gaps", type=_positive_int, default=200)
    p.add_argument("--draws", type=_positive_int, default=1000)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_autocorr)

    p = sub.add_parser("replicate", help="Monte Carlo recovery or selection study")
    p.add_argument("mode", choices=["recovery", "selection"])
    p.add_argument("--setting", required=True, help="1, 2, 3 or a catalog truth name")
    p.add_argument("--reps", type=int, required=True)
    p.add_argument("--n-subjects", type=_positive_int, default=200)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-iters", type=_positive_int)
    p.add_argument("--no-bootstrap", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_replicate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already printed by the parser
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, io.ParseError) as exc:
        print(f"oufactor: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DegenerateDataError, IndefiniteMatrixError, InvalidDriftError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        print(f"oufactor: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"oufactor: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
