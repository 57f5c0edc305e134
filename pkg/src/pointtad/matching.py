"""Hungarian label assignment and the set-prediction training objective."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autograd as ag
from . import geometry
from .autograd import Tensor


class CapacityError(ValueError):
    """More ground-truth instances than queries in one window."""


@dataclass
class LossWeights:
    alpha_l1: float = 5.0
    alpha_iou: float = 5.0
    alpha_cls: float = 10.0
    lambda_loc: float = 5.0
    lambda_cls: float = 10.0
    lambda_seg: float = 1.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ValueError(f"loss weight {k} must be nonnegative, got {v}")


@dataclass
class MatchResult:
    assignment: list  # per query: ground-truth index or None
    total_cost: float

    def pairs(self) -> tuple[np.ndarray, np.ndarray]:
        q = [i for i, g in enumerate(self.assignment) if g is not None]
        return np.array(q, dtype=np.int64), np.array([self.assignment[i] for i in q], dtype=np.int64)


@dataclass
class Target:
    """Ground truth of one window: (N_g, 2) normalised segments and (N_g,) labels."""

    segments: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.segments = np.asarray(self.segments, dtype=np.float64).reshape(-1, 2)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if len(self.segments) != len(self.labels):
            raise ValueError("segments and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)


def _softmax_np(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def matching_cost(class_logits, segments, target: Target, weights: LossWeights) -> np.ndarray:
    """Cost matrix (N_q, N_g): a_L1 * L1 - a_iou * tIoU - a_cls * p(gt class)."""
    logits = np.asarray(getattr(class_logits, "data", class_logits), dtype=np.float64)
    segs = np.asarray(getattr(segments, "data", segments), dtype=np.float64)
    if len(target) == 0:
        return np.zeros((len(segs), 0))
    prob = _softmax_np(logits)[:, target.labels]
    l1 = geometry.l1_distance(segs[:, None, :], target.segments[None, :, :])
    iou = geometry.pairwise_tiou(segs, target.segments)
    return weights.alpha_l1 * l1 - weights.alpha_iou * iou - weights.alpha_cls * prob


def hungarian_assign(cost) -> MatchResult:
    """Minimum-cost assignment of every ground truth (column) to a distinct query (row)."""
    cost = np.asarray(cost, dtype=np.float64)
    n_q, n_g = cost.shape
    if n_g > n_q:
        raise CapacityError(
            f"{n_g} ground-truth instances exceed {n_q} queries; use shorter windows or more queries")
    assignment = [None] * n_q
    if n_g == 0:
        return MatchResult(assignment, 0.0)
    rows, cols = linear_sum_assignment(cost)
    for r, c in zip(rows, cols):
        assignment[int(r)] = int(c)
    return MatchResult(assignment, float(cost[rows, cols].sum()))


def match_layer(layer, targets: list, weights: LossWeights) -> list:
    """Hungarian matching for every window of a batched layer output (no gradient)."""
    logits, segs = layer.class_logits.data, layer.segments.data
    return [hungarian_assign(matching_cost(logits[b], segs[b], t, weights))
            for b, t in enumerate(targets)]


def localization_loss(matches: list, segments: Tensor, targets: list) -> Tensor:
    """Mean over matched queries of L1 + (1 - tIoU), averaged over windows."""
    B = len(targets)
    b_idx, q_idx, gt, wts = [], [], [], []
    for b, (m, t) in enumerate(zip(matches, targets)):
        qi, gi = m.pairs()
        if len(qi) == 0:
            continue
        b_idx.append(np.full(len(qi), b))
        q_idx.append(qi)
        gt.append(t.segments[gi])
        wts.append(np.full(len(qi), 1.0 / (len(qi) * B)))
    if not b_idx:
        return Tensor(0.0)
    b_idx, q_idx = np.concatenate(b_idx), np.concatenate(q_idx)
    gt, wts = np.concatenate(gt), np.concatenate(wts)
    pred = segments[b_idx, q_idx]
    per = geometry.l1_distance(pred, gt) + (1.0 - geometry.tiou(pred, gt))
    return ag.tsum(per * wts)


def query_class_targets(matches: list, targets: list, n_queries: int, n_classes: int) -> np.ndarray:
    out = np.full((len(targets), n_queries), n_classes, dtype=np.int64)
    for b, (m, t) in enumerate(zip(matches, targets)):
        qi, gi = m.pairs()
        out[b, qi] = t.labels[gi]
    return out


def query_cross_entropy(matches: list, class_logits: Tensor, targets: list) -> Tensor:
    """Softmax cross-entropy of every query against its class or the no-action class,
    averaged over all queries."""
    B, Nq, C1 = class_logits.shape
    tgt = query_class_targets(matches, targets, Nq, C1 - 1)
    logp = ag.log_softmax(class_logits, axis=-1)
    picked = logp[np.arange(B)[:, None], np.arange(Nq)[None, :], tgt]
    return -ag.mean(picked)


def dense_bce(dense_logits: Tensor, dense_targets) -> Tensor:
    """Per-frame multi-label BCE averaged over frames and classes."""
    return ag.mean(ag.bce_with_logits(dense_logits, dense_targets))


def classification_loss(matches, class_logits, targets, dense_logits, dense_targets,
                        weights: LossWeights) -> Tensor:
    ce = query_cross_entropy(matches, class_logits, targets)
    if dense_logits is None:
        return ce
    return ce + weights.lambda_seg * dense_bce(dense_logits, dense_targets)


@dataclass
class LossBreakdown:
    total: Tensor
    components: dict = field(default_factory=dict)
    matches: list = field(default_factory=list)


def total_loss(layers: list, targets: list, dense_logits, dense_targets,
               weights: LossWeights) -> LossBreakdown:
    """Sum over layers of lambda_loc * L_loc + lambda_cls * L_cls, re-matching per layer.
    The dense per-frame term is attached to the final layer only."""
    if not layers:
        raise ValueError("total_loss needs at least one layer output")
    total = None
    comps = {"loc": 0.0, "ce": 0.0, "dense": 0.0}
    all_matches = []
    for i, layer in enumerate(layers):
        matches = match_layer(layer, targets, weights)
        all_matches.append(matches)
        loc = localization_loss(matches, layer.segments, targets)
        ce = query_cross_entropy(matches, layer.class_logits, targets)
        cls = ce
        if i == len(layers) - 1 and dense_logits is not None:
            dense = dense_bce(dense_logits, dense_targets)
            cls = ce + weights.lambda_seg * dense
            comps["dense"] = float(dense.data)
        term = weights.lambda_loc * loc + weights.lambda_cls * cls
        total = term if total is None else total + term
        comps["loc"] = float(loc.data)
        comps["ce"] = float(ce.data)
        comps[f"loc_layer{i}"] = float(loc.data)
        comps[f"ce_layer{i}"] = float(ce.data)
    comps["total"] = float(total.data)
    return LossBreakdown(total, comps, all_matches)
