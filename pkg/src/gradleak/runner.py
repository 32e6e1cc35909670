"""Configuration-driven experiment orchestration and report emission.

Three experiment modes are supported:

* ``frames``: invert shared gradients of raw video frames, reassemble the
  reconstructed sequence, upscale it, and score it against the originals.
* ``features``: invert shared gradients of a pooled feature matrix with a
  long-horizon stagnation schedule, once per optimizer.
* ``extractor-study``: fill the 12-cell grid of attack x architecture x
  input-routing combinations that contrasts raw-input leakage with the
  resilience of frozen-extractor features.

All randomness fans out from a single master seed via stable hashing, so a
fixed config produces a byte-identical ``report.json``. Wall-clock timings
are kept in rows (and in the CSV) but are replaced by ``null`` in the
canonical JSON so the determinism guarantee holds.
"""

from __future__ import annotations

import concurrent.futures
import csv
import dataclasses
import hashlib
import json
import time
import traceback
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .attacks import AttackConfig, dlg_attack, idlg_attack, rgap_reconstruct
from .autodiff import Tensor
from .harness import compute_shared_gradient
from .media import (
    Frame,
    FrameSequence,
    load_feature_matrix,
    load_frame_dir,
    max_pool_features,
    preprocess,
    tensor_to_frame,
    upscale_bicubic,
    write_frame_dir,
)
from .metrics import score_sequences
from .models import (
    build_by_id,
    build_frozen_extractor,
    extract_features,
)


class ConfigError(ValueError):
    """Invalid or incomplete experiment configuration."""


_MODES = ("frames", "features", "extractor-study")


@dataclass
class ExperimentConfig:
    mode: str
    input_path: str
    output_dir: str
    model_id: str = ""  # default chosen per mode
    model_seed: int = 0
    num_classes: int = 100
    attack: AttackConfig = None
    seed: int = 0
    jobs: int = 1
    upscale_factor: int = 4
    fps: int = 30
    feature_window: int = 32
    extractor_seed: int = 7
    extractor_features: int = 64
    label: int | None = None
    optimizers: tuple = ()  # features mode; empty = both
    max_inputs: int | None = None
    init_at_truth: bool = False  # diagnostic: start the dummy at the target

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ConfigError(f"mode must be one of {_MODES}, got {self.mode!r}")
        if not self.input_path:
            raise ConfigError("input_path is required")
        if not self.output_dir:
            raise ConfigError("output_dir is required")
        if self.attack is None:
            self.attack = default_attack_config(self.mode)
        if not self.model_id:
            self.model_id = {"frames": "dlg-lenet", "features": "feature-lenet"}.get(
                self.mode, ""
            )
        if self.mode == "frames" and self.upscale_factor < 1:
            raise ConfigError("upscale_factor must be >= 1")
        if self.mode == "frames" and self.fps <= 0:
            raise ConfigError("fps must be positive")
        if self.mode == "features" and self.feature_window < 1:
            raise ConfigError("feature_window must be >= 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        for opt in self.optimizers:
            if opt not in ("lbfgs", "adam"):
                raise ConfigError(f"unknown optimizer {opt!r}")

    def to_json(self):
        d = dataclasses.asdict(self)
        d["attack"] = dataclasses.asdict(self.attack)
        d["optimizers"] = list(self.optimizers)
        return d


def default_attack_config(mode):
    """Schedule defaults: short restarted runs for raw inputs, a long
    stagnation-perturbation run for feature targets."""
    if mode == "features":
        return AttackConfig(
            max_iterations=20_000,
            loss_threshold=1e-5,
            schedule="stagnation",
            stagnation_window=1000,
            stagnation_noise_sigma=0.001,
        )
    return AttackConfig(
        max_iterations=300, loss_threshold=1e-5, max_restarts=10, schedule="restart"
    )


def config_from_json(obj):
    obj = dict(obj)
    attack = obj.pop("attack", None)
    if attack is not None:
        attack = AttackConfig(**attack)
    mode = obj.get("mode")
    if mode is None:
        raise ConfigError("mode is required")
    try:
        cfg = ExperimentConfig(attack=attack, **obj)
    except TypeError as e:
        raise ConfigError(str(e)) from e
    return cfg


def stable_seed(master, *parts):
    """Deterministic 63-bit seed derived from the master seed and labels."""
    h = hashlib.sha256()
    h.update(str(int(master)).encode())
    for p in parts:
        h.update(b"|")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "little") >> 1


@dataclass
class StudyReport:
    mode: str
    rows: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def to_json(self):
        """Canonical form: row order preserved, keys sorted by the JSON
        encoder, wall-clock timings nulled out for reproducibility."""
        rows = []
        for r in self.rows:
            r = dict(r)
            if "wall_time" in r:
                r["wall_time"] = None
            rows.append(r)
        return {"mode": self.mode, "rows": rows, "summary": self.summary}


def report_from_json(obj):
    return StudyReport(mode=obj["mode"], rows=list(obj["rows"]), summary=obj["summary"])


def canonical_report_bytes(report):
    return (
        json.dumps(report.to_json(), sort_keys=True, indent=2, allow_nan=False) + "\n"
    ).encode()


def emit_report(report, output_dir):
    """Write report.json (canonical) and report.csv under output_dir."""
    import os

    try:
        os.makedirs(output_dir, exist_ok=True)
        with open(os.path.join(output_dir, "report.json"), "wb") as f:
            f.write(canonical_report_bytes(report))
        keys = sorted({k for r in report.rows for k in r})
        with open(os.path.join(output_dir, "report.csv"), "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=keys)
            w.writeheader()
            for r in report.rows:
                w.writerow({k: _csv_cell(r.get(k)) for k in keys})
    except OSError as e:
        raise OSError(f"cannot write report under {output_dir!r}: {e}") from e


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v, sort_keys=True)
    return v


def _write_trace(output_dir, name, result):
    import os

    tdir = os.path.join(output_dir, "traces")
    os.makedirs(tdir, exist_ok=True)
    with open(os.path.join(tdir, name + ".json"), "w") as f:
        json.dump(result.to_json(), f, indent=2)


def _finite(x):
    x = float(x)
    return x if np.isfinite(x) else None


def _mse(result, target):
    d = result.reconstructed_input.data.ravel() - target.data.ravel()
    return float(np.mean(d * d))


# ---------------------------------------------------------------------------
# frames mode


def _attack_one_frame(payload):
    """Worker for one frame; returns (row, reconstruction ndarray or None)."""
    from .models import model_from_manifest

    manifest, pixels, label, cfg_dict, init_at_truth = payload
    model = model_from_manifest(manifest)
    cfg = AttackConfig(**cfg_dict)
    xt = preprocess(Frame(pixels))
    capsule = compute_shared_gradient(model, xt, label)
    t0 = time.monotonic()
    try:
        res = dlg_attack(
            capsule,
            model,
            cfg,
            x_init=Tensor(xt.data.copy()) if init_at_truth else None,
        )
    except Exception as e:  # crash isolation: the row carries the error
        row = {
            "success": False,
            "error": f"{type(e).__name__}: {e}",
            "final_loss": None,
            "mse": None,
            "iterations": 0,
            "restarts": 0,
            "label": int(label),
            "wall_time": time.monotonic() - t0,
        }
        return row, None, None
    row = {
        "success": bool(res.success),
        "error": "",
        "final_loss": _finite(res.final_loss),
        "mse": _mse(res, xt),
        "iterations": len(res.loss_trace),
        "restarts": res.restarts_used,
        "label": int(label),
        "wall_time": res.wall_time,
    }
    return row, res.reconstructed_input.data, res


def run_frames_experiment(config):
    seq = load_frame_dir(config.input_path)
    frames = seq.frames
    if config.max_inputs is not None:
        frames = frames[: config.max_inputs]
    report = StudyReport(mode="frames")
    if not frames:
        report.summary = {"num_frames": 0}
        return report

    model = build_by_id(config.model_id, config.model_seed, (3, 32, 32), config.num_classes)
    manifest = model.manifest()
    payloads = []
    for i, fr in enumerate(frames):
        s = stable_seed(config.seed, "frames", i)
        cfg = replace(config.attack, seed=s)
        payloads.append(
            (manifest, fr.pixels, s % config.num_classes, dataclasses.asdict(cfg),
             config.init_at_truth)
        )

    results = _map_jobs(_attack_one_frame, payloads, config.jobs)

    low_frames, enhanced_frames = [], []
    for i, (row, recon, res) in enumerate(results):
        row = {"frame": i, **row}
        report.rows.append(row)
        if recon is None:
            recon = np.zeros((3, 32, 32))
        low = tensor_to_frame(Tensor(recon))
        low_frames.append(low)
        enhanced_frames.append(upscale_bicubic(low, config.upscale_factor))
        if res is not None:
            _write_trace(config.output_dir, f"frame_{i:04d}", res)

    low_seq = FrameSequence(low_frames, fps=config.fps)
    enh_seq = FrameSequence(enhanced_frames, fps=config.fps)
    high_seq = FrameSequence(frames, fps=config.fps)
    import os

    write_frame_dir(low_seq, os.path.join(config.output_dir, "low"))
    write_frame_dir(enh_seq, os.path.join(config.output_dir, "enhanced"))

    # Table-1-shaped quality summary. Reference-guided enhancement scenarios
    # are reported as unsupported rather than silently omitted.
    report.summary = {
        "num_frames": len(frames),
        "quality": {
            "enhanced_vs_high": score_sequences(
                enh_seq, high_seq, "enhanced_vs_high"
            ).to_json(),
            "enhanced_vs_low": score_sequences(
                enh_seq, low_seq, "enhanced_vs_low"
            ).to_json(),
            "one_reference": "not supported",
            "multiple_references": "not supported",
        },
    }
    return report


def _map_jobs(fn, payloads, jobs):
    if jobs <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, payloads))


# ---------------------------------------------------------------------------
# features mode


def run_features_experiment(config):
    fm = load_feature_matrix(config.input_path)
    pooled = max_pool_features(fm, config.feature_window)
    model = build_by_id(
        config.model_id, config.model_seed, tuple(pooled.shape), config.num_classes
    )
    if tuple(pooled.shape) != model.input_shape:
        raise ConfigError(
            f"pooled features {pooled.values.shape} do not match model input "
            f"{model.input_shape}"
        )
    xt = Tensor(pooled.as_array())
    label = config.label
    if label is None:
        label = stable_seed(config.seed, "features-label") % config.num_classes
    capsule = compute_shared_gradient(model, xt, label)

    report = StudyReport(mode="features")
    optimizers = tuple(config.optimizers) or ("adam", "lbfgs")
    for opt in optimizers:
        cfg = replace(
            config.attack,
            optimizer=opt,
            schedule="stagnation",
            seed=stable_seed(config.seed, "features", opt),
        )
        t0 = time.monotonic()
        try:
            res = dlg_attack(
                capsule,
                model,
                cfg,
                x_init=Tensor(xt.data.copy()) if config.init_at_truth else None,
                label_init=label if config.init_at_truth else None,
            )
        except Exception as e:
            report.rows.append(
                {
                    "optimizer": opt,
                    "success": False,
                    "error": f"{type(e).__name__}: {e}",
                    "final_loss": None,
                    "mse": None,
                    "iterations": 0,
                    "restarts": 0,
                    "wall_time": time.monotonic() - t0,
                }
            )
            continue
        report.rows.append(
            {
                "optimizer": opt,
                "success": bool(res.success),
                "error": "",
                "final_loss": _finite(res.final_loss),
                "mse": _mse(res, xt),
                "iterations": len(res.loss_trace),
                "restarts": res.restarts_used,
                "wall_time": res.wall_time,
            }
        )
        _write_trace(config.output_dir, f"features_{opt}", res)
    report.summary = {
        "pooled_shape": list(pooled.shape),
        "label": int(label),
        "num_optimizers": len(optimizers),
    }
    return report


# ---------------------------------------------------------------------------
# extractor-study mode

_STUDY_ATTACKS = ("dlg", "idlg", "rgap")
_STUDY_COLUMNS = (  # (architecture, routed through the frozen extractor?)
    ("simple", False),
    ("simple", True),
    ("moderate", False),
    ("moderate", True),
)
_STUDY_MSE_LIMIT = 1e-2  # Y requires loss below threshold AND target MSE below this
_RGAP_REL_LIMIT = 1e-2

# Reference outcome each cell is compared against: iterative attacks break
# everything except the moderate classifier behind the frozen extractor, and
# the layer-wise analytic attack fails across the board. Cells that land on
# the other side of the threshold are listed under summary["deviations"] with
# their loss traces kept on disk for inspection.
_REFERENCE_GRID = {
    "dlg": {
        "simple+raw": "Y",
        "simple+extractor": "Y",
        "moderate+raw": "Y",
        "moderate+extractor": "N",
    },
    "idlg": {
        "simple+raw": "Y",
        "simple+extractor": "Y",
        "moderate+raw": "Y",
        "moderate+extractor": "N",
    },
    "rgap": {
        "simple+raw": "N",
        "simple+extractor": "N",
        "moderate+raw": "N",
        "moderate+extractor": "N",
    },
}


def _study_cell(payload):
    (
        attack,
        arch,
        use_extractor,
        index,
        manifest,
        target,
        label,
        cfg_dict,
    ) = payload
    from .models import model_from_manifest

    model = model_from_manifest(manifest)
    xt = Tensor(np.asarray(target))
    capsule = compute_shared_gradient(model, xt, label)
    row = {
        "attack": attack,
        "architecture": arch,
        "extractor": bool(use_extractor),
        "input": index,
        "label": int(label),
        "error": "",
    }
    t0 = time.monotonic()
    res = None
    try:
        if attack == "rgap":
            recon, info = rgap_reconstruct(capsule, model)
            rel = float(
                np.linalg.norm(recon.data.ravel() - xt.data.ravel())
                / max(np.linalg.norm(xt.data.ravel()), 1e-30)
            )
            row.update(
                {
                    "success": rel < _RGAP_REL_LIMIT,
                    "relative_error": rel,
                    "mse": float(np.mean((recon.data.ravel() - xt.data.ravel()) ** 2)),
                    "final_loss": None,
                    "iterations": 0,
                    "restarts": 0,
                    "rank_report": info["layers"],
                    "approximate": bool(info.get("approximate")),
                }
            )
        else:
            cfg = AttackConfig(**cfg_dict)
            fn = dlg_attack if attack == "dlg" else idlg_attack
            res = fn(capsule, model, cfg)
            mse = _mse(res, xt)
            row.update(
                {
                    "success": bool(res.success) and mse < _STUDY_MSE_LIMIT,
                    "final_loss": _finite(res.final_loss),
                    "mse": mse,
                    "iterations": len(res.loss_trace),
                    "restarts": res.restarts_used,
                }
            )
    except Exception as e:
        row.update(
            {
                "success": False,
                "error": f"{type(e).__name__}: {traceback.format_exception_only(type(e), e)[-1].strip()}",
                "final_loss": None,
                "mse": None,
                "iterations": 0,
                "restarts": 0,
            }
        )
    row["wall_time"] = time.monotonic() - t0
    return row, res


def run_extractor_study(config):
    seq = load_frame_dir(config.input_path)
    frames = seq.frames[: (config.max_inputs or 1)]
    if not frames:
        raise ConfigError(f"no frames found under {config.input_path!r}")

    extractor = build_frozen_extractor(
        config.extractor_features, seed=config.extractor_seed
    )
    raw_inputs, feat_inputs = [], []
    for fr in frames:
        x = preprocess(fr)
        raw_inputs.append(x.data)
        feat_inputs.append(extract_features(extractor, x).data)

    payloads = []
    for attack in _STUDY_ATTACKS:
        for arch, use_extractor in _STUDY_COLUMNS:
            for i in range(len(frames)):
                target = feat_inputs[i] if use_extractor else raw_inputs[i]
                model = build_by_id(
                    arch,
                    config.model_seed,
                    tuple(np.asarray(target).shape),
                    config.num_classes,
                )
                s = stable_seed(config.seed, "study", attack, arch, use_extractor, i)
                cfg = _study_attack_config(config, use_extractor, s)
                payloads.append(
                    (
                        attack,
                        arch,
                        use_extractor,
                        i,
                        model.manifest(),
                        target,
                        config.label if config.label is not None else s % config.num_classes,
                        dataclasses.asdict(cfg),
                    )
                )

    results = _map_jobs(_study_cell, payloads, config.jobs)
    report = StudyReport(mode="extractor-study")
    for (row, res) in results:
        report.rows.append(row)
        if res is not None:
            name = "study_{attack}_{architecture}_{route}_{input:02d}".format(
                route="ext" if row["extractor"] else "raw", **row
            )
            _write_trace(config.output_dir, name, res)
    report.summary = _study_grid(report.rows)
    return report


def _study_attack_config(config, use_extractor, seed):
    """Raw cells use the short restarted schedule; feature cells use the long
    stagnation schedule. The first-order optimizer is the default for the
    long schedule (a curvature-based line search there is orders of magnitude
    slower for no observed benefit); --optimizer overrides both."""
    if use_extractor:
        cfg = default_attack_config("features")
        opt = config.optimizers[0] if config.optimizers else "adam"
        return replace(cfg, optimizer=opt, seed=seed, lr=config.attack.lr)
    cfg = default_attack_config("frames")
    opt = config.optimizers[0] if config.optimizers else "lbfgs"
    return replace(cfg, optimizer=opt, seed=seed, lr=config.attack.lr)


def _study_grid(rows):
    """Y/N grid keyed by attack then column, majority across inputs."""
    grid = {}
    for attack in _STUDY_ATTACKS:
        cols = {}
        for arch, ext in _STUDY_COLUMNS:
            cell = [
                r
                for r in rows
                if r["attack"] == attack
                and r["architecture"] == arch
                and r["extractor"] == ext
            ]
            wins = sum(1 for r in cell if r["success"])
            key = f"{arch}+{'extractor' if ext else 'raw'}"
            cols[key] = "Y" if cell and wins * 2 > len(cell) else "N"
        grid[attack] = cols
    deviations = [
        {
            "attack": attack,
            "cell": key,
            "observed": grid[attack][key],
            "reference": _REFERENCE_GRID[attack][key],
        }
        for attack in _STUDY_ATTACKS
        for key in grid[attack]
        if grid[attack][key] != _REFERENCE_GRID[attack][key]
    ]
    return {"grid": grid, "reference": _REFERENCE_GRID, "deviations": deviations}


_RUNNERS = {
    "frames": run_frames_experiment,
    "features": run_features_experiment,
    "extractor-study": run_extractor_study,
}


def run_experiment(config):
    report = _RUNNERS[config.mode](config)
    emit_report(report, config.output_dir)
    return report
