#!/usr/bin/env python3
"""Classifier-complexity study: the 12-cell attack grid.

Attacks {DLG, iDLG, R-GAP} are run against {simple, moderate} classifiers
whose inputs are either raw 32x32 RGB images or the output of a frozen
feature extractor. Prints the resulting Y/N grid.

Usage: run_extractor_study.py [--out DIR] [--images N] [--seed S] [--jobs N]
"""

import argparse
import json
import os
import sys
import tempfile

from make_synthetic_frames import main as make_frames

from gradleak.runner import ExperimentConfig, run_experiment


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="study_out")
    p.add_argument("--images", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        src = os.path.join(tmp, "images")
        make_frames(
            [src, "--frames", str(args.images), "--height", "32", "--width", "32",
             "--seed", str(args.seed)]
        )
        config = ExperimentConfig(
            mode="extractor-study",
            input_path=src,
            output_dir=args.out,
            seed=args.seed,
            num_classes=13,
            max_inputs=args.images,
            jobs=args.jobs,
        )
        report = run_experiment(config)
    print(json.dumps(report.summary["grid"], indent=2, sort_keys=True))
    for dev in report.summary["deviations"]:
        print(
            "deviation: {attack} {cell} observed={observed} "
            "reference={reference}".format(**dev)
        )
    print(f"artifacts in {args.out}")


if __name__ == "__main__":
    sys.exit(main())
