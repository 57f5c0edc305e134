"""Clip-level inference and evaluation on top of window-level models."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .data import rasterize, sliding_windows
from .metrics import dense_to_sparse, detection_map, segmentation_map, sparse_to_dense
from .structures import ActionInstance, ClassDurationStats


def make_windows(clips, window_frames: int, overlap_ratio: float, min_retained: float = 0.5) -> list:
    out = []
    for c in clips:
        out.extend(sliding_windows(c, window_frames, overlap_ratio, min_retained))
    return out


def windows_to_arrays(windows) -> tuple:
    X = np.stack([w.features for w in windows])
    y = [[(a.start, a.end, a.class_id) for a in w.instances] for w in windows]
    return X, y


def worker_count() -> int:
    """Size of the evaluation worker pool, capped by ``POINTTAD_THREADS`` (default 1)."""
    raw = os.environ.get("POINTTAD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"POINTTAD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError(f"POINTTAD_THREADS must be a positive integer, got {raw!r}")
    return n


def _predict_clip(detector, clip, window_frames: int, min_score: float):
    stride = detector.config_.stride
    wins = sliding_windows(clip, window_frames, 0.0)
    X = np.stack([w.features for w in wins])
    prob, segs, dprob = detector.predict_raw(X)
    T = clip.n_frames
    preds = []
    grid = np.zeros((T // stride, detector.n_classes))
    for w, p, s, d in zip(wins, prob, segs, dprob):
        for inst in detector._instances(p, s, min_score):
            start = (w.start_frame + inst.start * window_frames) / T
            end = (w.start_frame + inst.end * window_frames) / T
            preds.append(ActionInstance(min(start, 1.0), min(end, 1.0), inst.class_id,
                                        inst.score, clip.clip_id))
        lo = w.start_frame // stride
        n = min(d.shape[0], grid.shape[0] - lo)
        grid[lo:lo + n] = d[:n]
    return preds, grid


def predict_clips(detector, clips, window_frames: int, min_score: float = 0.0,
                  workers: int | None = None) -> tuple:
    """Run the detector on non-overlapping windows and map results to clip time.

    Returns (predictions with ``video_id`` = clip id, {clip_id: dense probs (T', C)}).
    Clips are spread over ``workers`` threads; results keep clip order.
    """
    workers = worker_count() if workers is None else workers
    job = lambda c: _predict_clip(detector, c, window_frames, min_score)  # noqa: E731
    if workers > 1 and len(clips) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(job, clips))
    else:
        results = [job(c) for c in clips]
    preds, dense = [], {}
    for clip, (p, grid) in zip(clips, results):
        preds.extend(p)
        dense[clip.clip_id] = grid
    return preds, dense


def ground_truth(clips) -> list:
    return [ActionInstance(a.start, a.end, a.class_id, video_id=c.clip_id)
            for c in clips for a in c.instances]


def evaluate_clips(detector, clips, window_frames: int, beta: float = 0.2, gamma: float = 0.01,
                   stats: ClassDurationStats | None = None, bin_thresh: float = 0.5,
                   workers: int | None = None) -> tuple:
    """Detection-mAP of sparse predictions, segmentation-mAP after fusion, and,
    when ``stats`` are given, detection-mAP of the dense head converted to instances."""
    preds, dense = predict_clips(detector, clips, window_frames, workers=workers)
    result = score_predictions(preds, dense, clips, detector.n_classes, detector.config_.stride,
                               beta, gamma, stats, bin_thresh)
    return result, preds, dense


def score_predictions(preds, dense, clips, n_classes: int, stride: int = 1, beta: float = 0.2,
                      gamma: float = 0.01, stats: ClassDurationStats | None = None,
                      bin_thresh: float = 0.5) -> tuple:
    """Metrics for clip-level predictions and dense scores (see ``evaluate_clips``)."""
    gts = ground_truth(clips)
    report = detection_map(preds, gts)
    by_clip = {}
    for p in preds:
        by_clip.setdefault(p.video_id, []).append(p)
    fused, targets = [], []
    for c in clips:
        d = dense[c.clip_id]
        fused.append(sparse_to_dense(by_clip.get(c.clip_id, []), d, beta, gamma))
        targets.append(rasterize(c.instances, d.shape[0], n_classes))
    result = {
        "per_threshold_map": report.to_dict()["per_threshold_map"],
        "avg_map": report.avg_map,
        "seg_map": segmentation_map(np.concatenate(fused), np.concatenate(targets)),
    }
    if stats is not None:
        s = stats.rescale(stride)
        base = [inst for c in clips
                for inst in dense_to_sparse(dense[c.clip_id], s, bin_thresh, video_id=c.clip_id)]
        base_report = detection_map(base, gts)
        result["dense_baseline"] = {"per_threshold_map": base_report.to_dict()["per_threshold_map"],
                                    "avg_map": base_report.avg_map}
    return result
