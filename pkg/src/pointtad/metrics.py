"""Detection-mAP, segmentation-mAP, and the sparse <-> dense score conversions."""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import pairwise_tiou
from .structures import ActionInstance, ClassDurationStats

TIOU_THRESHOLDS = tuple(round(0.1 * i, 1) for i in range(1, 10))


class EvaluationError(ValueError):
    pass


def interpolated_ap(tp: np.ndarray, n_positive: int) -> float:
    """All-point interpolated AP from a ranked TP/FP sequence."""
    if n_positive == 0:
        raise EvaluationError("AP undefined without positives")
    tp = np.asarray(tp, dtype=np.float64)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_positive
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _rank(preds: list) -> list:
    return sorted(preds, key=lambda p: (-p.score, str(p.video_id), p.start, p.end))


def match_detections(preds: list, gts: list, threshold: float) -> np.ndarray:
    """Greedy TP flags for same-class predictions ranked by score."""
    by_video = defaultdict(list)
    for g in gts:
        by_video[g.video_id].append((g.start, g.end))
    gt_arr = {v: np.array(s, dtype=np.float64) for v, s in by_video.items()}
    used = {v: np.zeros(len(s), dtype=bool) for v, s in gt_arr.items()}
    flags = np.zeros(len(preds))
    for k, p in enumerate(preds):
        segs = gt_arr.get(p.video_id)
        if segs is None:
            continue
        iou = pairwise_tiou(np.array([[p.start, p.end]]), segs)[0]
        iou[used[p.video_id]] = -1.0
        j = int(np.argmax(iou))
        if iou[j] >= threshold:
            flags[k] = 1.0
            used[p.video_id][j] = True
    return flags


@dataclass
class DetectionReport:
    per_threshold: dict
    avg_map: float
    per_class: dict = field(default_factory=dict)  # threshold -> {class_id: AP}

    def to_dict(self) -> dict:
        return {"per_threshold_map": {f"{t:.1f}": v for t, v in self.per_threshold.items()},
                "avg_map": self.avg_map}


def detection_map(preds: list, gts: list, thresholds=TIOU_THRESHOLDS) -> DetectionReport:
    """Instance-level mAP per tIoU threshold and its mean over thresholds.

    Classes without ground truth are left out of the mean.
    """
    gt_by_class = defaultdict(list)
    for g in gts:
        gt_by_class[g.class_id].append(g)
    if not gt_by_class:
        raise EvaluationError("detection_map: no ground-truth instances")
    pred_by_class = defaultdict(list)
    for p in preds:
        if p.score is None:
            raise EvaluationError("detection_map: prediction without score")
        pred_by_class[p.class_id].append(p)
    ranked = {c: _rank(pred_by_class.get(c, [])) for c in gt_by_class}

    per_threshold, per_class = {}, {}
    for t in thresholds:
        aps = {}
        for c in sorted(gt_by_class):
            flags = match_detections(ranked[c], gt_by_class[c], t)
            aps[c] = interpolated_ap(flags, len(gt_by_class[c]))
        per_class[t] = aps
        per_threshold[t] = float(np.mean(list(aps.values())))
    return DetectionReport(per_threshold, float(np.mean(list(per_threshold.values()))), per_class)


def frame_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Non-interpolated AP of one class over frames; tied scores form one operating point."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels, dtype=np.float64).ravel()
    n_pos = labels.sum()
    if n_pos == 0:
        raise EvaluationError("frame AP undefined without positive frames")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    ends = np.r_[np.flatnonzero(np.diff(s) != 0), s.size - 1]
    ctp = np.cumsum(y)[ends]
    cnt = ends + 1.0
    recall = ctp / n_pos
    precision = ctp / cnt
    prev = np.r_[0.0, recall[:-1]]
    return float(np.sum((recall - prev) * precision))


def segmentation_map(scores, targets) -> float:
    """Frame-wise mAP over classes with at least one positive frame."""
    S = np.asarray(scores, dtype=np.float64)
    G = np.asarray(targets, dtype=np.float64)
    if S.shape != G.shape:
        raise EvaluationError(f"segmentation_map: scores {S.shape} vs targets {G.shape}")
    S = S.reshape(-1, S.shape[-1])
    G = G.reshape(-1, G.shape[-1])
    aps = [frame_average_precision(S[:, c], G[:, c]) for c in range(S.shape[1]) if G[:, c].any()]
    if not aps:
        raise EvaluationError("segmentation_map: no positive frames")
    return float(np.mean(aps))


def frame_centres(n_frames: int) -> np.ndarray:
    return (np.arange(n_frames) + 0.5) / n_frames


def gaussian_bump(pred: ActionInstance, times: np.ndarray, min_sigma: float = 0.0) -> np.ndarray:
    """score * exp(-(t - mid)^2 / (2 sigma^2)) with sigma = duration / 2."""
    mid = 0.5 * (pred.start + pred.end)
    sigma = max(0.5 * pred.duration, min_sigma)
    if sigma == 0.0:
        return np.where(times == mid, float(pred.score), 0.0)
    return float(pred.score) * np.exp(-((times - mid) ** 2) / (2.0 * sigma ** 2))


def sparse_to_dense(preds: list, dense, beta: float, gamma: float) -> np.ndarray:
    """Fuse sparse predictions of one video into its (T', C) dense scores:
    beta * sum of Gaussian bumps of predictions scoring above gamma
    + (1 - beta) * dense, clipped to [0, 1]."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError(f"beta must lie in [0, 1], got {beta}")
    S = np.asarray(dense, dtype=np.float64)
    T, C = S.shape
    times = frame_centres(T)
    bumps = np.zeros_like(S)
    for p in preds:
        if p.score > gamma:
            bumps[:, p.class_id] += gaussian_bump(p, times, min_sigma=0.5 / T)
    return np.clip(beta * bumps + (1.0 - beta) * S, 0.0, 1.0)


def dense_to_sparse(dense, stats: ClassDurationStats, bin_thresh: float = 0.5,
                    video_id=None) -> list:
    """Turn each maximal run of frames with score >= bin_thresh into an instance
    scored by (sum of run scores) * exp(-0.01 (L - mu_C)^2 / sigma_C^2).

    ``stats`` must be measured in frames of ``dense``.
    """
    S = np.asarray(dense, dtype=np.float64)
    T, C = S.shape
    out = []
    for c in range(C):
        pos = S[:, c] >= bin_thresh
        edges = np.diff(np.r_[0, pos.astype(np.int8), 0])
        starts, ends = np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)
        for a, b in zip(starts, ends):
            L = b - a
            score = S[a:b, c].sum() * np.exp(-0.01 * (L - stats.mean[c]) ** 2 / stats.std[c] ** 2)
            out.append(ActionInstance(a / T, b / T, c, float(score), video_id))
    return out


# -- file formats ---------------------------------------------------------

def write_instances_jsonl(path, instances: list) -> None:
    with open(path, "w") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_dict()) + "\n")


def read_instances_jsonl(path) -> list:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(ActionInstance.from_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise EvaluationError(f"{path}:{lineno}: malformed instance ({exc})") from None
    return out


def write_dense_scores(path, dense) -> None:
    S = np.asarray(dense, dtype=np.float64)
    Path(path).write_text(json.dumps({"shape": list(S.shape), "values": S.ravel().tolist()}))


def read_dense_scores(path) -> np.ndarray:
    doc = json.loads(Path(path).read_text())
    vals = np.asarray(doc["values"], dtype=np.float64)
    shape = tuple(doc["shape"])
    if vals.size != int(np.prod(shape)):
        raise EvaluationError(f"{path}: {vals.size} values do not fill shape {shape}")
    return vals.reshape(shape)
