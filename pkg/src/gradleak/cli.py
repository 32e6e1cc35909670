"""Command-line entry point.

Subcommands:

* ``attack-frames``    — gradient inversion of a frame directory (frames mode)
* ``attack-features``  — gradient inversion of a feature file (features mode)
* ``extractor-study``  — the 12-cell attack x architecture x routing grid
* ``score``            — standalone PSNR/SSIM between two frame directories
* ``report``           — re-emit report.json/report.csv from a saved report

Exit codes: 0 = run completed (attack failure is still a completed run),
1 = configuration error, 2 = I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .media import FormatError, load_frame_dir
from .metrics import score_sequences
from .runner import (
    ConfigError,
    ExperimentConfig,
    canonical_report_bytes,
    config_from_json,
    emit_report,
    report_from_json,
    run_experiment,
)

_EXIT_OK = 0
_EXIT_CONFIG = 1
_EXIT_IO = 2


def _add_common(p):
    p.add_argument("--config", help="JSON experiment config file")
    p.add_argument("--input", help="input path (overrides config)")
    p.add_argument("--seed", type=int, help="master seed (overrides config)")
    p.add_argument("--out", help="output directory (overrides config)")
    p.add_argument("--jobs", type=int, help="parallel workers")
    p.add_argument("--optimizer", choices=("lbfgs", "adam"))
    p.add_argument("--max-inputs", type=int, dest="max_inputs")


def build_parser():
    p = argparse.ArgumentParser(prog="gradleak")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd in ("attack-frames", "attack-features", "extractor-study"):
        _add_common(sub.add_parser(cmd))
    ps = sub.add_parser("score")
    ps.add_argument("candidate", help="frame directory to score")
    ps.add_argument("reference", help="reference frame directory")
    ps.add_argument("--out", help="write the score JSON here instead of stdout")
    ps.add_argument("--resolution", type=int, default=128)
    pr = sub.add_parser("report")
    pr.add_argument("report_json", help="existing report.json")
    pr.add_argument("--out", required=True, help="output directory")
    return p


_MODE_BY_COMMAND = {
    "attack-frames": "frames",
    "attack-features": "features",
    "extractor-study": "extractor-study",
}


def _load_config(args):
    obj = {}
    if args.config:
        try:
            with open(args.config) as f:
                obj = json.load(f)
        except OSError as e:
            raise OSError(f"cannot read config {args.config!r}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {args.config!r} is not valid JSON: {e}") from e
        if not isinstance(obj, dict):
            raise ConfigError("config root must be a JSON object")
    obj["mode"] = _MODE_BY_COMMAND[args.command]
    if args.input:
        obj["input_path"] = args.input
    if args.out:
        obj["output_dir"] = args.out
    if args.seed is not None:
        obj["seed"] = args.seed
    if args.jobs is not None:
        obj["jobs"] = args.jobs
    if args.max_inputs is not None:
        obj["max_inputs"] = args.max_inputs
    if args.optimizer:
        obj["optimizers"] = [args.optimizer]
    if "input_path" not in obj:
        raise ConfigError("input path required (--input or config input_path)")
    if "output_dir" not in obj:
        raise ConfigError("output directory required (--out or config output_dir)")
    return config_from_json(obj)


def _cmd_experiment(args):
    config = _load_config(args)
    report = run_experiment(config)
    failures = sum(1 for r in report.rows if not r.get("success", True))
    print(
        f"{config.mode}: {len(report.rows)} rows, {failures} attack failure(s); "
        f"report written to {config.output_dir}"
    )
    return _EXIT_OK


def _cmd_score(args):
    cand = load_frame_dir(args.candidate)
    ref = load_frame_dir(args.reference)
    rep = score_sequences(cand, ref, "score", resolution=args.resolution)
    text = json.dumps(rep.to_json(), sort_keys=True, indent=2) + "\n"
    if args.out:
        import os

        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "score.json"), "w") as f:
            f.write(text)
    sys.stdout.write(text)
    return _EXIT_OK


def _cmd_report(args):
    try:
        with open(args.report_json) as f:
            obj = json.load(f)
    except OSError as e:
        raise OSError(f"cannot read {args.report_json!r}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{args.report_json!r} is not valid JSON: {e}") from e
    try:
        report = report_from_json(obj)
    except KeyError as e:
        raise ConfigError(f"{args.report_json!r} is not a study report: {e}") from e
    emit_report(report, args.out)
    sys.stdout.buffer.write(canonical_report_bytes(report))
    return _EXIT_OK


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command in _MODE_BY_COMMAND:
            return _cmd_experiment(args)
        if args.command == "score":
            return _cmd_score(args)
        return _cmd_report(args)
    except (OSError, FormatError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return _EXIT_IO
    except (ConfigError, ValueError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return _EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
