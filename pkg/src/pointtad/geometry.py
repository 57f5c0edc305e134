"""Interval arithmetic, point-set to segment transforms, and point refinement.

Segments are arrays with a trailing axis of size 2 holding (start, end) in
normalised clip time. Point sets are arrays with a trailing axis of N_s
points. Every function accepts either numpy arrays or autograd tensors and
returns the same kind it was given, so the decoder and the losses share one
implementation with the plain numeric checks.
"""

from __future__ import annotations

import math
from typing import NamedTuple

import numpy as np

from . import autograd as ag
from .autograd import Tensor

POINT_MIN, POINT_MAX = -0.5, 1.5


class Segment(NamedTuple):
    start: float
    end: float

    @property
    def length(self) -> float:
        return self.end - self.start


def _wrap(x):
    if isinstance(x, Tensor):
        return x, True
    return Tensor(np.asarray(x, dtype=np.float64)), False


def _out(t: Tensor, as_tensor: bool):
    return t if as_tensor else t.data


def n_local_points(n_points: int) -> int:
    return math.ceil(2 * n_points / 3)


def canonical_local_mask(n_points: int) -> np.ndarray:
    """Boolean mask selecting the first ceil(2*N_s/3) points as local points."""
    mask = np.zeros(n_points, dtype=bool)
    mask[: n_local_points(n_points)] = True
    return mask


def tiou(a, b):
    """Temporal IoU of segments ``a`` and ``b`` (broadcast over leading axes).

    Zero-length unions give 0.
    """
    a, ta = _wrap(a)
    b, tb = _wrap(b)
    inter = ag.relu(ag.minimum(a[..., 1], b[..., 1]) - ag.maximum(a[..., 0], b[..., 0]))
    union = (a[..., 1] - a[..., 0]) + (b[..., 1] - b[..., 0]) - inter
    iou = inter / ag.maximum(union, 1e-12)
    return _out(iou, ta or tb)


def pairwise_tiou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(N, 2) x (M, 2) -> (N, M) tIoU matrix on plain arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 2)
    return tiou(a[:, None, :], b[None, :, :])


def l1_distance(a, b):
    """Mean absolute endpoint difference, ``(|ds| + |de|) / 2``."""
    a, ta = _wrap(a)
    b, tb = _wrap(b)
    return _out(ag.mean(ag.absolute(a - b), axis=-1), ta or tb)


def minmax_transform(points):
    """(..., N_s) points -> (..., 2) segment spanning all points."""
    p, t = _wrap(points)
    if p.shape[-1] == 0:
        raise ValueError("minmax_transform needs at least one point")
    seg = ag.concat([ag.reshape(ag.amin(p, -1), p.shape[:-1] + (1,)),
                     ag.reshape(ag.amax(p, -1), p.shape[:-1] + (1,))], axis=-1)
    return _out(seg, t)


def partial_minmax_transform(points, local_mask):
    """Min-max over the points flagged in ``local_mask`` only."""
    mask = np.asarray(local_mask, dtype=bool)
    p, t = _wrap(points)
    if mask.shape != (p.shape[-1],):
        raise ValueError(f"local mask of shape {mask.shape} does not fit {p.shape[-1]} points")
    if not mask.any():
        raise ValueError("local mask selects no points")
    idx = np.flatnonzero(mask)
    if idx.size == mask.size:
        return minmax_transform(points)
    return _out(minmax_transform(p[..., idx]), t)


def point_span(points):
    p, t = _wrap(points)
    return _out(ag.amax(p, -1) - ag.amin(p, -1), t)


def refine_points(points, deltas):
    """Self-paced update ``t + delta * span * 0.5``, clamped to [-0.5, 1.5].

    ``span`` is the max-min extent of each point set, so collapsed sets do
    not move.
    """
    p, tp = _wrap(points)
    d, td = _wrap(deltas)
    if p.shape != d.shape:
        raise ValueError(f"deltas {d.shape} do not match points {p.shape}")
    span = ag.reshape(ag.amax(p, -1) - ag.amin(p, -1), p.shape[:-1] + (1,))
    moved = p + d * span * 0.5
    return _out(ag.clip(moved, POINT_MIN, POINT_MAX), tp or td)


def refine_segments(segments, deltas):
    """Duration-scaled update of (start, end) pairs, the segment-based counterpart
    of :func:`refine_points`. Endpoints are re-sorted afterwards."""
    s, ts = _wrap(segments)
    d, td = _wrap(deltas)
    dur = ag.reshape(s[..., 1] - s[..., 0], s.shape[:-1] + (1,))
    moved = ag.clip(s + d * dur * 0.5, POINT_MIN, POINT_MAX)
    return _out(minmax_transform(moved), ts or td)
