from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class ActionInstance:
    """One action: normalised (start, end), class id, and a score for predictions."""

    start: float
    end: float
    class_id: int
    score: Optional[float] = None
    video_id: Optional[str] = None

    def __post_init__(self):
        self.start = float(self.start)
        self.end = float(self.end)
        self.class_id = int(self.class_id)
        if self.start > self.end:
            raise ValueError(f"instance start {self.start} > end {self.end}")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")

    @property
    def duration(self) -> float:
        return self.end - self.start

    def to_dict(self) -> dict:
        d = {"start": self.start, "end": self.end, "class_id": self.class_id}
        if self.video_id is not None:
            d = {"video_id": self.video_id, **d}
        if self.score is not None:
            d["score"] = float(self.score)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ActionInstance":
        return cls(d["start"], d["end"], d["class_id"], d.get("score"), d.get("video_id"))


@dataclass
class ClassDurationStats:
    """Per-class mean and standard deviation of action durations, in frames."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.maximum(np.asarray(self.std, dtype=np.float64), 1.0)

    @classmethod
    def from_durations(cls, durations_by_class: list) -> "ClassDurationStats":
        mean, std = [], []
        for d in durations_by_class:
            d = np.asarray(d, dtype=np.float64)
            mean.append(d.mean() if d.size else 0.0)
            std.append(d.std() if d.size else 1.0)
        return cls(np.array(mean), np.array(std))

    @classmethod
    def from_instances(cls, clips_instances: list, n_frames: list, n_classes: int) -> "ClassDurationStats":
        per = [[] for _ in range(n_classes)]
        for insts, n in zip(clips_instances, n_frames):
            for inst in insts:
                per[inst.class_id].append(inst.duration * n)
        return cls.from_durations(per)

    def rescale(self, factor: float) -> "ClassDurationStats":
        """Durations measured on a grid ``factor`` times coarser."""
        return ClassDurationStats(self.mean / factor, self.std / factor)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassDurationStats":
        return cls(d["mean"], d["std"])
