"""Command-line entry points: generate, train, eval, gradcheck, visualize."""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .data import DatasetFormatError, GenerationError, SyntheticConfig, generate_dataset, load_dataset, save_dataset
from .estimator import PointTADDetector
from .gradcheck import MODEL_TOLERANCE, OP_TOLERANCE, run_model_check, run_op_checks
from .matching import CapacityError
from .metrics import read_instances_jsonl, write_instances_jsonl
from .params import CheckpointError
from .pipeline import evaluate_clips, make_windows, score_predictions, windows_to_arrays
from .viz import point_trajectories, render_svg

CONFIG_FILE = "config.json"
LOG_FILE = "log.jsonl"
CHECKPOINT_FILE = "checkpoint.json"
BEST_CHECKPOINT_FILE = "checkpoint.best.json"
PREDICTIONS_FILE = "predictions.jsonl"
METRICS_FILE = "metrics.json"
SVG_FILE = "points.svg"
POINTS_FILE = "points.json"

LOG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "pointtad training log record (one per epoch)",
    "type": "object",
    "required": ["epoch", "lr", "steps", "first_step_loss", "total", "loc", "ce", "dense", "val_avg_map"],
    "properties": {
        "epoch": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "steps": {"type": "integer", "minimum": 1},
        "first_step_loss": {"type": "number"},
        "total": {"type": "number"},
        "loc": {"type": "number", "minimum": 0},
        "ce": {"type": "number", "minimum": 0},
        "dense": {"type": "number", "minimum": 0},
        "grad_norm": {"type": "number", "minimum": 0},
        "val_avg_map": {"type": ["number", "null"], "minimum": 0, "maximum": 1},
    },
    "patternProperties": {"^(loc|ce)_layer[0-9]+$": {"type": "number", "minimum": 0}},
    "additionalProperties": False,
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Everything a run needs besides paths. Sections mirror the JSON file."""

    data: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    window_frames: int = 64
    train_overlap: float = 0.75
    beta: float = 0.2
    gamma: float = 0.01
    bin_thresh: float = 0.5
    seed: int = 0

    def synthetic_config(self) -> SyntheticConfig:
        return SyntheticConfig(**{**self.data, "seed": self.seed})

    def detector(self) -> PointTADDetector:
        return PointTADDetector(**{**self.model, "seed": self.seed})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**d)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.synthetic_config()
        except TypeError as exc:
            raise ConfigError(f"data section: {exc}") from None
        except ValueError as exc:
            raise ConfigError(f"data section: {exc}") from None
        valid = set(PointTADDetector().get_params())
        unknown = sorted(set(self.model) - valid)
        if unknown:
            raise ConfigError(f"model section: unknown keys {', '.join(unknown)}")
        if self.model.get("preset", "desk") not in ("desk", "paper"):
            raise ConfigError(f"model section: unknown preset {self.model['preset']!r}")
        if self.window_frames < 2:
            raise ConfigError("window_frames must be >= 2")
        if not 0.0 <= self.train_overlap < 1.0:
            raise ConfigError("train_overlap must lie in [0, 1)")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError("beta must lie in [0, 1]")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")


def resolve_config(args) -> RunConfig:
    """Defaults, then the --config file, then explicit flags."""
    d = {}
    if getattr(args, "config", None):
        try:
            d = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}:{exc.lineno}: {exc.msg}") from None
        if not isinstance(d, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
    cfg = RunConfig.from_dict(d)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "preset", None):
        cfg.model = {**cfg.model, "preset": args.preset}
    if getattr(args, "epochs", None) is not None:
        cfg.model = {**cfg.model, "epochs": args.epochs}
    for name in ("beta", "gamma"):
        if getattr(args, name, None) is not None:
            setattr(cfg, name, getattr(args, name))
    cfg.validate()
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- generate ---------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = resolve_config(args)
    out = _out_dir(args)
    ds = generate_dataset(cfg.synthetic_config())
    save_dataset(ds, out)
    _write_json(out / CONFIG_FILE, cfg.to_dict())
    sizes = ", ".join(f"{k}={len(v)}" for k, v in ds.splits.items())
    print(f"wrote dataset to {out} ({sizes})")
    return 0


# -- train ------------------------------------------------------------------

def _check_capacity(windows, n_queries: int) -> None:
    for w in windows:
        if len(w.instances) > n_queries:
            raise CapacityError(
                f"window {w.clip_id}@{w.start_frame} holds {len(w.instances)} instances but only "
                f"{n_queries} queries exist; use shorter windows or more queries")


def _validation_map(det, ds, cfg: RunConfig):
    clips = ds.splits.get("val") or []
    if not clips:
        return None
    res, _, _ = evaluate_clips(det, clips, cfg.window_frames, cfg.beta, cfg.gamma)
    return res["avg_map"]


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    out = _out_dir(args)
    ckpt_path = out / CHECKPOINT_FILE
    windows = make_windows(ds.splits["train"], cfg.window_frames, cfg.train_overlap)
    if not windows:
        raise ConfigError("training split is empty")
    X, y = windows_to_arrays(windows)

    if args.resume and ckpt_path.exists():
        det = PointTADDetector.load_checkpoint(ckpt_path)
        if not _same_run(det_meta_config(ckpt_path), cfg.to_dict()):
            raise CheckpointError(
                f"checkpoint format v1: {ckpt_path} was trained with a different run config; "
                "remove it or pass the original --config/--seed/--preset")
        records = [json.loads(line) for line in (out / LOG_FILE).read_text().splitlines() if line.strip()]
        records = records[:det.epoch_]
        det.epochs = cfg.detector().epochs
    else:
        det = cfg.detector()
        det.initialize(X.shape[2])
        records = []
    _check_capacity(windows, det.config_.n_queries)
    X, targets, dense = det._prepare(X, y)
    _write_json(out / CONFIG_FILE, cfg.to_dict())
    best = max((_selection_score(r) for r in records), default=None)
    meta = {"run_config": cfg.to_dict()}

    with open(out / LOG_FILE, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
        while det.epoch_ < det.epochs:
            record = dict(det._run_epoch(X, targets, dense))
            record["val_avg_map"] = _validation_map(det, ds, cfg)
            det.history_[-1] = record
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            fh.flush()
            det.save_checkpoint(ckpt_path, meta)
            score = _selection_score(record)
            if best is None or score > best:
                det.save_checkpoint(out / BEST_CHECKPOINT_FILE, meta)
                best = score
            v = record["val_avg_map"]
            val = "n/a" if v is None else f"{v:.4f}"
            print(f"epoch {record['epoch']:3d} loss {record['total']:.4f} loc {record['loc']:.4f} "
                  f"ce {record['ce']:.4f} val avg-mAP {val}", flush=True)
    return 0


def _selection_score(record: dict) -> float:
    """Validation avg-mAP when a validation split exists, else negated training loss."""
    v = record["val_avg_map"]
    return -record["total"] if v is None else v


def _same_run(saved: dict | None, current: dict) -> bool:
    """Run configs match apart from the epoch budget, which a resume may extend."""
    if saved is None:
        return False
    strip = lambda d: {**d, "model": {k: v for k, v in d["model"].items() if k != "epochs"}}  # noqa: E731
    return strip(saved) == strip(current)


def det_meta_config(path) -> dict | None:
    from .params import load_arrays

    _, meta = load_arrays(path)
    return meta.get("run_config")


# -- eval -------------------------------------------------------------------

def _check_compatible(det, ds) -> None:
    problems = []
    if det.config_.input_width != ds.config.feature_width:
        problems.append(f"input_width {det.config_.input_width} != dataset feature_width "
                        f"{ds.config.feature_width}")
    if det.n_classes != ds.config.n_classes:
        problems.append(f"n_classes {det.n_classes} != dataset n_classes {ds.config.n_classes}")
    if problems:
        raise CheckpointError("checkpoint format v1: checkpoint/dataset mismatch: " + "; ".join(problems))


def cmd_eval(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    if args.split not in ds.splits or not ds.splits[args.split]:
        raise ConfigError(f"dataset has no clips in split {args.split!r}")
    clips = ds.splits[args.split]
    out = _out_dir(args)
    if args.predictions:
        import numpy as np

        preds = read_instances_jsonl(args.predictions)
        n_classes = ds.config.n_classes
        dense = {c.clip_id: np.zeros((c.n_frames, n_classes)) for c in clips}
        result = score_predictions(preds, dense, clips, n_classes, 1, cfg.beta, cfg.gamma)
        source = str(args.predictions)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint or --predictions")
        det = PointTADDetector.load_checkpoint(args.checkpoint)
        _check_compatible(det, ds)
        result, preds, _ = evaluate_clips(det, clips, cfg.window_frames, cfg.beta, cfg.gamma,
                                          stats=ds.stats, bin_thresh=cfg.bin_thresh)
        source = Path(args.checkpoint).name
    write_instances_jsonl(out / PREDICTIONS_FILE, preds)
    result.update({"split": args.split, "beta": cfg.beta, "gamma": cfg.gamma,
                   "n_predictions": len(preds), "source": source})
    _write_json(out / METRICS_FILE, result)
    print(f"avg-mAP {result['avg_map']:.4f}  mAP@0.5 {result['per_threshold_map']['0.5']:.4f}  "
          f"seg-mAP {result['seg_map']:.4f}")
    return 0


# -- gradcheck --------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    ops = run_op_checks(OP_TOLERANCE, corrupt=args.corrupt)
    ok = True
    for r in ops:
        ok &= r["passed"]
        print(f"{'PASS' if r['passed'] else 'FAIL'}  {r['op']:<20s} {r['shape']:<28s} {r['rel_error']:.2e}")
    model_err, per_param = run_model_check(args.seed or 0)
    model_ok = model_err < MODEL_TOLERANCE
    ok &= model_ok
    print(f"{'PASS' if model_ok else 'FAIL'}  {'tiny_model':<20s} {model_err:.2e}")
    if args.out:
        out = _out_dir(args)
        _write_json(out / METRICS_FILE, {
            "op_tolerance": OP_TOLERANCE, "model_tolerance": MODEL_TOLERANCE, "ops": ops,
            "model": {"max_rel_error": model_err, "passed": model_ok, "per_parameter": per_param},
            "passed": bool(ok)})
    return 0 if ok else 1


# -- visualize --------------------------------------------------------------

def cmd_visualize(args) -> int:
    cfg = resolve_config(args)
    ds = load_dataset(args.data)
    try:
        clip = ds.clip(args.clip)
    except KeyError:
        raise ConfigError(f"unknown clip id {args.clip!r}") from None
    if args.checkpoint:
        det = PointTADDetector.load_checkpoint(args.checkpoint)
        _check_compatible(det, ds)
    else:
        det = cfg.detector()
        det.initialize(ds.config.feature_width)
    out = _out_dir(args)
    traj = point_trajectories(det, clip, cfg.window_frames)
    _write_json(out / POINTS_FILE, traj)
    (out / SVG_FILE).write_text(render_svg(traj))
    print(f"wrote {out / POINTS_FILE} and {out / SVG_FILE}")
    return 0


# -- entry ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pointtad", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_required=True):
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--seed", type=int, help="seed for data, initialisation and data order")
        p.add_argument("--out", required=out_required, help="output directory")
        return p

    common(sub.add_parser("generate", help="write a synthetic dataset"))

    p = common(sub.add_parser("train", help="train a detector"))
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--preset", choices=("desk", "paper"))
    p.add_argument("--epochs", type=int)
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.json")
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint or a predictions file"))
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="score this JSONL instead of running a model")
    p.add_argument("--split", default="test")
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and a tiny model")
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--corrupt", help=argparse.SUPPRESS)

    p = common(sub.add_parser("visualize", help="plot query points of one clip"))
    p.add_argument("--data", required=True)
    p.add_argument("--clip", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--preset", choices=("desk", "paper"))
    return parser


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval,
            "gradcheck": cmd_gradcheck, "visualize": cmd_visualize}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, DatasetFormatError, GenerationError, CapacityError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
