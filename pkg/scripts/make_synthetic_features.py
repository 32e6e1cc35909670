#!/usr/bin/env python3
"""Generate a synthetic clip-feature file of shape (1, 10, 2048).

The values are smooth positive activations (softplus of a low-rank field),
matching the general look of pooled video-network features.

Usage: make_synthetic_features.py OUT_FILE [--seed S] [--json]
"""

import argparse
import json
import sys

import numpy as np

from gradleak.media import FeatureMatrix, feature_matrix_to_json, write_feature_matrix


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out_file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true", help="write JSON instead of binary")
    args = p.parse_args(argv)

    rng = np.random.default_rng(args.seed)
    a = rng.normal(size=(10, 8))
    b = rng.normal(size=(8, 2048))
    field = (a @ b) / np.sqrt(8)
    values = np.log1p(np.exp(field))[None, ...]  # softplus, shape (1, 10, 2048)
    m = FeatureMatrix(values.shape, values)
    if args.json:
        with open(args.out_file, "w") as f:
            json.dump(feature_matrix_to_json(m), f)
    else:
        write_feature_matrix(m, args.out_file)
    print(f"wrote features {values.shape} to {args.out_file}")


if __name__ == "__main__":
    sys.exit(main())
