#!/usr/bin/env python3
"""Generate a synthetic video as a frame directory.

Frames are smooth drifting color gradients (bounded spatial derivative), so
they survive resize round-trips cleanly and make reconstruction quality easy
to judge by eye.

Usage: make_synthetic_frames.py OUT_DIR [--frames N] [--height H] [--width W]
       [--fps FPS] [--seed S]
"""

import argparse
import sys

import numpy as np

from gradleak.media import Frame, FrameSequence, write_frame_dir


def synthetic_frame(h, w, t, rng_phase):
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    chans = []
    for c in range(3):
        p = rng_phase[c]
        v = (
            0.5
            + 0.25 * np.sin(2 * np.pi * (xx + 0.05 * t) + p)
            + 0.2 * np.cos(2 * np.pi * (yy - 0.03 * t) + 2 * p)
        )
        chans.append(v)
    img = np.clip(np.stack(chans, axis=-1), 0.0, 1.0)
    return Frame((img * 255).round().astype(np.uint8))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out_dir")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--height", type=int, default=240)
    p.add_argument("--width", type=int, default=320)
    p.add_argument("--fps", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    phases = rng.uniform(0, 2 * np.pi, size=3)
    frames = [
        synthetic_frame(args.height, args.width, t, phases)
        for t in range(args.frames)
    ]
    write_frame_dir(FrameSequence(frames, fps=args.fps), args.out_dir)
    print(f"wrote {args.frames} frames ({args.height}x{args.width}) to {args.out_dir}")


if __name__ == "__main__":
    sys.exit(main())
