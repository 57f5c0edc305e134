"""Synthetic multi-label temporal data, sliding windows, and dataset I/O.

Each class owns a dedicated group of feature channels. While an instance is
active its class adds a phase-shifted sinusoid to every channel of the group,
so concurrent instances of different classes superpose without interfering.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .params import decode_array, encode_array
from .structures import ActionInstance, ClassDurationStats


class GenerationError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    pass


@dataclass
class SyntheticConfig:
    n_classes: int = 5
    clip_length: int = 256
    feature_width: int = 20
    max_concurrency: int = 3
    instances_per_clip: tuple = (6, 14)
    duration_range: tuple = (6, 24)
    noise_std: float = 0.3
    amplitude: float = 1.0
    n_train: int = 200
    n_val: int = 10
    n_test: int = 50
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        self.instances_per_clip = tuple(self.instances_per_clip)
        self.duration_range = tuple(self.duration_range)
        errors = []
        if self.n_classes < 1:
            errors.append("n_classes must be >= 1")
        if self.feature_width < self.n_classes:
            errors.append("feature_width must provide at least one channel per class")
        if self.max_concurrency < 2:
            errors.append("max_concurrency must be >= 2")
        lo, hi = self.duration_range
        if not 1 <= lo <= hi <= self.clip_length:
            errors.append("duration_range must satisfy 1 <= min <= max <= clip_length")
        a, b = self.instances_per_clip
        if not 0 <= a <= b:
            errors.append("instances_per_clip must satisfy 0 <= min <= max")
        if self.noise_std < 0:
            errors.append("noise_std must be >= 0")
        if errors:
            raise ValueError("invalid SyntheticConfig: " + "; ".join(errors))

    @property
    def group_width(self) -> int:
        return self.feature_width // self.n_classes

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["instances_per_clip"] = list(self.instances_per_clip)
        d["duration_range"] = list(self.duration_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown SyntheticConfig fields: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Clip:
    clip_id: str
    features: np.ndarray  # (T, F)
    instances: list  # ActionInstance, normalised to the clip

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Window:
    clip_id: str
    start_frame: int
    features: np.ndarray  # (window_frames, F), zero padded past the clip end
    instances: list  # ActionInstance, normalised to the window
    n_valid: int = 0

    @property
    def n_frames(self) -> int:
        return self.features.shape[0]


@dataclass
class Dataset:
    config: SyntheticConfig
    splits: dict = field(default_factory=dict)  # split name -> list of Clip
    stats: ClassDurationStats | None = None

    def clip(self, clip_id: str) -> Clip:
        for clips in self.splits.values():
            for c in clips:
                if c.clip_id == clip_id:
                    return c
        raise KeyError(f"unknown clip id {clip_id!r}")


def class_frequency(c: int) -> float:
    """Cycles per frame of class ``c``'s signature."""
    return 1.0 / (5.0 + 2.0 * c)


def class_signature(c: int, cfg: SyntheticConfig, rel_frames: np.ndarray) -> np.ndarray:
    """Signature values (len(rel_frames), group_width) for class ``c``."""
    g = cfg.group_width
    phase = 2.0 * math.pi * np.arange(g) / g
    ang = 2.0 * math.pi * class_frequency(c) * rel_frames[:, None] + phase[None, :]
    return cfg.amplitude * np.cos(ang)


def render_features(instances: list, cfg: SyntheticConfig, noise: np.ndarray | None = None) -> np.ndarray:
    T, g = cfg.clip_length, cfg.group_width
    X = np.zeros((T, cfg.feature_width)) if noise is None else noise.copy()
    for inst in instances:
        s = int(round(inst.start * T))
        e = int(round(inst.end * T))
        X[s:e, inst.class_id * g:(inst.class_id + 1) * g] += class_signature(
            inst.class_id, cfg, np.arange(e - s, dtype=np.float64))
    return X


def _place_instances(cfg: SyntheticConfig, rng: np.random.Generator) -> list:
    T = cfg.clip_length
    lo, hi = cfg.instances_per_clip
    n = int(rng.integers(lo, hi + 1))
    load = np.zeros(T, dtype=np.int64)
    occupied = np.zeros((cfg.n_classes, T), dtype=bool)
    out = []
    for _ in range(n):
        for _attempt in range(cfg.max_retries):
            c = int(rng.integers(cfg.n_classes))
            d = int(rng.integers(cfg.duration_range[0], cfg.duration_range[1] + 1))
            s = int(rng.integers(0, T - d + 1))
            e = s + d
            # same-class instances keep a one-frame gap so their runs stay distinct
            if occupied[c, max(s - 1, 0):min(e + 1, T)].any():
                continue
            if (load[s:e] + 1 > cfg.max_concurrency).any():
                continue
            load[s:e] += 1
            occupied[c, s:e] = True
            out.append(ActionInstance(s / T, e / T, c))
            break
        else:
            raise GenerationError(
                f"could not place instance after {cfg.max_retries} attempts; "
                "relax max_concurrency, durations or instance counts")
    out.sort(key=lambda a: (a.start, a.end, a.class_id))
    return out


def generate_clip(clip_id: str, cfg: SyntheticConfig, rng: np.random.Generator) -> Clip:
    instances = _place_instances(cfg, rng)
    noise = rng.standard_normal((cfg.clip_length, cfg.feature_width)) * cfg.noise_std
    return Clip(clip_id, render_features(instances, cfg, noise), instances)


def generate_dataset(cfg: SyntheticConfig) -> Dataset:
    rng = np.random.default_rng(cfg.seed)
    splits = {}
    for name, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        splits[name] = [generate_clip(f"{name}_{i:04d}", cfg, rng) for i in range(n)]
    stats = ClassDurationStats.from_instances(
        [c.instances for c in splits["train"]], [c.n_frames for c in splits["train"]], cfg.n_classes)
    return Dataset(cfg, splits, stats)


def window_starts(n_frames: int, window_frames: int, overlap_ratio: float) -> list:
    if not 0.0 <= overlap_ratio < 1.0:
        raise ValueError(f"overlap_ratio must lie in [0, 1), got {overlap_ratio}")
    if n_frames <= window_frames:
        return [0]
    stride = max(1, int(round(window_frames * (1.0 - overlap_ratio))))
    starts = []
    for s in range(0, n_frames, stride):
        starts.append(s)
        if s + window_frames >= n_frames:
            break
    return starts


def sliding_windows(clip: Clip, window_frames: int, overlap_ratio: float,
                    min_retained: float = 0.5) -> list:
    """Cut a clip into fixed-length windows.

    Instances are clipped to each window and dropped when less than
    ``min_retained`` of their duration survives.
    """
    T = clip.n_frames
    out = []
    for ws in window_starts(T, window_frames, overlap_ratio):
        we = ws + window_frames
        feats = np.zeros((window_frames, clip.features.shape[1]))
        valid = min(T, we) - ws
        feats[:valid] = clip.features[ws:ws + valid]
        kept = []
        for inst in clip.instances:
            s, e = inst.start * T, inst.end * T
            lo, hi = max(s, ws), min(e, we)
            dur = e - s
            if hi <= lo or (dur > 0 and (hi - lo) / dur < min_retained):
                continue
            kept.append(ActionInstance((lo - ws) / window_frames, (hi - ws) / window_frames,
                                       inst.class_id))
        out.append(Window(clip.clip_id, ws, feats, kept, valid))
    return out


def rasterize(instances: list, n_frames: int, n_classes: int) -> np.ndarray:
    """(n_frames, C) multi-hot grid; frame ``i`` is positive when its centre
    ``(i + 0.5) / n_frames`` lies in [start, end)."""
    grid = np.zeros((n_frames, n_classes))
    centres = (np.arange(n_frames) + 0.5) / n_frames
    for inst in instances:
        grid[(centres >= inst.start) & (centres < inst.end), inst.class_id] = 1.0
    return grid


# -- I/O ------------------------------------------------------------------

def save_dataset(ds: Dataset, path) -> None:
    root = Path(path)
    (root / "features").mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": ds.config.to_dict(),
        "splits": {k: [c.clip_id for c in v] for k, v in ds.splits.items()},
        "stats": ds.stats.to_dict() if ds.stats is not None else None,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    for split, clips in ds.splits.items():
        with open(root / f"annotations_{split}.jsonl", "w") as fh:
            for c in clips:
                rec = {"clip_id": c.clip_id, "n_frames": c.n_frames,
                       "instances": [i.to_dict() for i in c.instances]}
                fh.write(json.dumps(rec) + "\n")
        for c in clips:
            (root / "features" / f"{c.clip_id}.json").write_text(json.dumps(encode_array(c.features)))


def _read_annotations(path: Path) -> list:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                insts = [ActionInstance.from_dict(d) for d in rec["instances"]]
                records.append((rec["clip_id"], int(rec["n_frames"]), insts))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetFormatError(f"{path}:{lineno}: malformed record ({exc})") from None
    return records


def load_dataset(path) -> Dataset:
    root = Path(path)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError:
        raise DatasetFormatError(f"{root}: no manifest.json") from None
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"{root / 'manifest.json'}:{exc.lineno}: {exc.msg}") from None
    cfg = SyntheticConfig.from_dict(manifest["config"])
    splits = {}
    for split in manifest["splits"]:
        ann = root / f"annotations_{split}.jsonl"
        records = _read_annotations(ann) if ann.exists() else []
        clips = []
        for clip_id, n_frames, insts in records:
            feat_path = root / "features" / f"{clip_id}.json"
            try:
                feats = decode_array(json.loads(feat_path.read_text()))
            except (OSError, json.JSONDecodeError, ValueError) as exc:
                raise DatasetFormatError(f"{feat_path}: cannot read features ({exc})") from None
            if feats.shape[0] != n_frames:
                raise DatasetFormatError(f"{feat_path}: {feats.shape[0]} frames, annotation says {n_frames}")
            clips.append(Clip(clip_id, feats, insts))
        splits[split] = clips
    stats = ClassDurationStats.from_dict(manifest["stats"]) if manifest.get("stats") else None
    return Dataset(cfg, splits, stats)
