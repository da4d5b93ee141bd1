#!/usr/bin/env python3
"""End-to-end CLI pipeline demo on a generated dataset.

Writes a synthetic witness dataset to disk, then drives the confex CLI:
segment -> scores -> calibrate -> explain -> evaluate -> render.

Usage: python scripts/demo_pipeline.py --workdir out/demo
"""

import argparse
import sys
from pathlib import Path

from confex.cli import main as confex
from confex.synthetic import WitnessGenerator, write_dataset


def run(*argv) -> None:
    argv = [str(a) for a in argv]
    print(f"$ confex {' '.join(argv)}")
    code = confex(argv)
    if code != 0:
        sys.exit(code)


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--workdir", default="out/demo")
    parser.add_argument("--n", type=int, default=80)
    parser.add_argument("--kind", default="superpixel",
                        choices=["pixelwise", "superpixel", "scaled", "summed"])
    parser.add_argument("--epsilon", type=float, default=0.1)
    args = parser.parse_args()

    workdir = Path(args.workdir)
    data = workdir / "data"
    out = workdir / "out"
    manifest = write_dataset(data, WitnessGenerator(), n=args.n, seed=0)
    predictor = f"synthetic:witness:{data / 'region.cfxt'}:0.3"
    print(f"dataset -> {manifest}")

    slic = ["--slic-k", 9]
    run("segment", "--manifest", manifest, "--out", out, *slic)
    run("scores", "--manifest", manifest, "--predictor", predictor,
        "--kind", args.kind, "--tau-distinct", "--out", out, *slic)
    run("calibrate", "--scores", out / f"scores_{args.kind}.jsonl",
        "--epsilon", args.epsilon, "--out", out)
    artifact = out / f"artifact_{args.kind}_{args.epsilon:g}.json"
    run("explain", "--manifest", manifest, "--artifact", artifact,
        "--predictor", predictor, "--out", out, *slic)
    masks = out / f"masks_{args.kind}_{args.epsilon:g}" / "masks.jsonl"
    run("evaluate", "--masks", masks, "--artifact", artifact, "--csv", out / "report.csv")
    run("render", "--manifest", manifest, "--masks", masks, "--limit", 4,
        "--out", out / "renders")


if __name__ == "__main__":
    main()
