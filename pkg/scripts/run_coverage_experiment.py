#!/usr/bin/env python3
"""Empirical coverage experiment.

Calibrates on fresh synthetic draws and measures how often explanation masks
fail to reproduce the model's prediction, per seed, epsilon and conformity
kind; the rate should stay within epsilon plus binomial slack.

Usage: python scripts/run_coverage_experiment.py --seeds 20 --out out/coverage.csv
"""

import argparse
import time
from pathlib import Path

from confex.conformity import ConformityKind
from confex.evaluation import (
    COVERAGE_FIELDS,
    CoverageTrialConfig,
    run_coverage_trial,
    summarize_coverage,
    write_csv,
)
from confex.synthetic import WitnessGenerator


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--k-cal", type=int, default=500)
    parser.add_argument("--n-test", type=int, default=1000)
    parser.add_argument("--seeds", type=int, default=20)
    parser.add_argument("--epsilons", type=float, nargs="+", default=[0.01, 0.05, 0.10, 0.15])
    parser.add_argument("--rho", type=float, default=0.5)
    parser.add_argument("--jobs", type=int, default=2)
    parser.add_argument("--out", default="out/coverage.csv")
    args = parser.parse_args()

    kinds = (
        ConformityKind("pixelwise"),
        ConformityKind("superpixel", args.rho),
        ConformityKind("scaled", args.rho),
        ConformityKind("summed"),
    )
    cfg = CoverageTrialConfig(
        generator=WitnessGenerator(),
        kinds=kinds,
        k_calibration=args.k_cal,
        n_test=args.n_test,
        epsilons=tuple(args.epsilons),
        seeds=tuple(range(args.seeds)),
        jobs=args.jobs,
    )
    start = time.time()
    rows = run_coverage_trial(cfg)
    elapsed = time.time() - start

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(rows, out, fields=COVERAGE_FIELDS)
    s = summarize_coverage(rows)
    print(f"{s['ok']}/{s['cells']} cells within bound ({100 * s['ok_fraction']:.1f}%)")
    print(f"worst excess over bound: {s['worst_excess']:+.4f}")
    print(f"elapsed: {elapsed:.1f}s -> {out}")


if __name__ == "__main__":
    main()
