"""Independent brute-force references used by the tests."""

from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np


def brute_force_assignment_cost(cost: np.ndarray) -> float:
    """Minimum total cost over every injection of columns (targets) into rows (queries)."""
    n_rows, n_cols = cost.shape
    best = np.inf
    for rows in itertools.permutations(range(n_rows), n_cols):
        best = min(best, sum(cost[r, c] for c, r in enumerate(rows)))
    return best


def _iou(a, b):
    inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
    union = (a[1] - a[0]) + (b[1] - b[0]) - inter
    return inter / union if union > 0 else 0.0


def exhaustive_ap(preds, gts, threshold):
    """AP from the full precision/recall curve, in exact rational arithmetic.

    ``preds`` are (score, start, end) already ranked; the curve has one point
    per ranked prefix and precision is interpolated as the best precision at
    any recall at least as large.
    """
    used = [False] * len(gts)
    hits = []
    for _, s, e in preds:
        best, arg = -1.0, None
        for j, g in enumerate(gts):
            if not used[j]:
                v = _iou((s, e), g)
                if v > best:
                    best, arg = v, j
        if arg is not None and best >= threshold:
            used[arg] = True
            hits.append(1)
        else:
            hits.append(0)
    n = len(gts)
    curve = []
    tp = 0
    for k, h in enumerate(hits, start=1):
        tp += h
        curve.append((Fraction(tp, n), Fraction(tp, k)))
    levels = sorted({r for r, _ in curve} | {Fraction(0)})
    ap = Fraction(0)
    for lo, hi in zip(levels, levels[1:]):
        # precision on (lo, hi] is the best precision reached at recall >= hi
        ap += (hi - lo) * max(p for r, p in curve if r >= hi)
    return float(ap)


def reference_frame_ap(scores, labels):
    """Non-interpolated AP summed over distinct score thresholds, written out naively."""
    scores = list(map(float, scores))
    labels = list(map(int, labels))
    n_pos = sum(labels)
    total, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(sel)
        recall = tp / n_pos
        total += (recall - prev_recall) * (tp / len(sel))
        prev_recall = recall
    return total


def matched_filter_detect(features, cfg, threshold=0.5):
    """Decode (start, end, class) triples from raw features.

    Each frame of a class's channel group is correlated with the group's
    phase template exp(-i 2 pi k / g); an active signature gives magnitude
    amplitude * g / 2 whatever its temporal phase. Frames above
    ``threshold`` times that level form runs, one run per instance.
    """
    T = features.shape[0]
    g = cfg.group_width
    template = np.exp(-2j * np.pi * np.arange(g) / g)
    level = cfg.amplitude * g / 2.0
    out = []
    for c in range(cfg.n_classes):
        z = np.abs(features[:, c * g:(c + 1) * g] @ template)
        active = z > threshold * level
        edges = np.diff(np.r_[0, active.astype(int), 0])
        for a, b in zip(np.flatnonzero(edges == 1), np.flatnonzero(edges == -1)):
            out.append((a / T, b / T, c))
    return out
