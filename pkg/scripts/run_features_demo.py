#!/usr/bin/env python3
"""Feature-matrix inversion demo.

Generates a synthetic (1, 10, 2048) feature file, max-pools it to
(1, 10, 64), and runs the long stagnation-schedule attack against the
feature classifier with both optimizers. The expected outcome is failure to
reconstruct — this demo exists to show the contrast with the raw-frame
pipeline.

Usage: run_features_demo.py [--out DIR] [--seed S] [--iterations N]
"""

import argparse
import json
import os
import sys
import tempfile

from make_synthetic_features import main as make_features

from gradleak.attacks import AttackConfig
from gradleak.runner import ExperimentConfig, run_experiment


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--out", default="features_demo_out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--iterations", type=int, default=20_000)
    args = p.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        src = os.path.join(tmp, "clip.fmat")
        make_features([src, "--seed", str(args.seed)])
        config = ExperimentConfig(
            mode="features",
            input_path=src,
            output_dir=args.out,
            seed=args.seed,
            num_classes=13,
            attack=AttackConfig(
                max_iterations=args.iterations,
                schedule="stagnation",
            ),
        )
        report = run_experiment(config)
    for row in report.rows:
        print(json.dumps({k: row[k] for k in sorted(row)}, default=str))
    print(f"artifacts in {args.out}")


if __name__ == "__main__":
    sys.exit(main())
