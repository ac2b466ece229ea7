"""Model selection study: how often AIC and BIC pick each candidate factor count.

    python3 scripts/run_selection.py --truth two_factor_high --reps 20 --seed 1

Use --reps 100 for the full-scale table.
"""

import argparse
import time

from oufactor.estimation import FitConfig
from oufactor.simulation import TRUTHS, replicate_selection


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--truth", nargs="+", default=["two_factor_high"], choices=sorted(TRUTHS))
    ap.add_argument("--reps", type=int, default=20)
    ap.add_argument("--n-subjects", type=int, default=200)
    ap.add_argument("--seed", type=int, default=1)
    ap.add_argument("--workers", type=int, default=1)
    ap.add_argument("--out", default=None, help="CSV with one block per truth")
    args = ap.parse_args()

    chunks = []
    for name in args.truth:
        t0 = time.perf_counter()
        s = replicate_selection(name, args.reps, FitConfig(), seed=args.seed, N=args.n_subjects,
                                workers=args.workers)
        line = lambda m: "  ".join(f"p={k}: {v:5.1f}%" for k, v in s.percentages(m).items())
        print(f"{name} ({s.n_usable}/{args.reps} usable, {time.perf_counter() - t0:.0f}s)")
        print(f"  AIC  {line('aic')}")
        print(f"  BIC  {line('bic')}")
        chunks.append(s.to_csv() if not chunks else s.to_csv().split("\n", 1)[1])
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("".join(chunks))


if __name__ == "__main__":
    main()
