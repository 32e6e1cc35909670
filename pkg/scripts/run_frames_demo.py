#!/usr/bin/env python3
"""End-to-end raw-frame inversion demo.

Generates a short synthetic video, attacks each frame's shared gradient,
rebuilds the low-resolution sequence, upscales it 4x, and prints the quality
summary. Expect a few minutes per frame.

Usage: run_frames_demo.py [--out DIR] [--frames N] [--seed S] [--jobs N]
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
    p.add_argument("--out", default="frames_demo_out")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        src = os.path.join(tmp, "video")
        make_frames([src, "--frames", str(args.frames), "--seed", str(args.seed)])
        config = ExperimentConfig(
            mode="frames",
            input_path=src,
            output_dir=args.out,
            seed=args.seed,
            jobs=args.jobs,
        )
        report = run_experiment(config)
    ok = sum(1 for r in report.rows if r["success"])
    print(f"reconstructed {ok}/{len(report.rows)} frames")
    print(json.dumps(report.summary["quality"], indent=2, sort_keys=True))
    print(f"artifacts in {args.out}")


if __name__ == "__main__":
    sys.exit(main())
