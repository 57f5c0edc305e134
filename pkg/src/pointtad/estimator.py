"""scikit-learn style wrappers around the detector and the dense->sparse baseline."""

from __future__ import annotations

import time

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import autograd as ag
from .data import rasterize
from .decoder import DecoderConfig, PointTADModel
from .matching import CapacityError, LossWeights, total_loss
from .metrics import dense_to_sparse, detection_map
from .optim import AdamW, clip_grad_norm
from .params import load_arrays, save_arrays
from .structures import ActionInstance, ClassDurationStats
from .validation import check_is_fitted, check_targets, check_windows

_CONFIG_KEYS = ("n_queries", "n_points", "n_layers", "d_model", "d_bottleneck", "n_heads",
                "n_subpoints", "stride", "representation", "frame_mixing", "channel_mixing")
_WEIGHT_KEYS = ("alpha_l1", "alpha_iou", "alpha_cls", "lambda_loc", "lambda_cls", "lambda_seg")
CHECKPOINT_KIND = "pointtad-detector"
PRESET_LR = {"desk": 1e-3, "paper": 2e-4}


class PointTADDetector(BaseEstimator):
    """Sparse query-point temporal action detector.

    ``fit`` takes windows ``X`` of shape (n_windows, T, F) and per-window
    lists of ``(start, end, class_id)`` in window-normalised time. Decoder
    fields and ``lr`` left as ``None`` fall back to ``preset``.
    """

    def __init__(self, n_classes=5, preset="desk", n_queries=None, n_points=None, n_layers=None,
                 d_model=None, d_bottleneck=None, n_heads=None, n_subpoints=None, stride=1,
                 representation="points", frame_mixing=True, channel_mixing=True,
                 alpha_l1=5.0, alpha_iou=5.0, alpha_cls=10.0,
                 lambda_loc=5.0, lambda_cls=10.0, lambda_seg=1.0,
                 lr=None, weight_decay=1e-4, lr_decay_every=10, batch_size=8, epochs=30,
                 clip_norm=None, point_lr_mult=1.0, seed=0, verbose=False):
        self.n_classes = n_classes
        self.preset = preset
        self.n_queries = n_queries
        self.n_points = n_points
        self.n_layers = n_layers
        self.d_model = d_model
        self.d_bottleneck = d_bottleneck
        self.n_heads = n_heads
        self.n_subpoints = n_subpoints
        self.stride = stride
        self.representation = representation
        self.frame_mixing = frame_mixing
        self.channel_mixing = channel_mixing
        self.alpha_l1 = alpha_l1
        self.alpha_iou = alpha_iou
        self.alpha_cls = alpha_cls
        self.lambda_loc = lambda_loc
        self.lambda_cls = lambda_cls
        self.lambda_seg = lambda_seg
        self.lr = lr
        self.weight_decay = weight_decay
        self.lr_decay_every = lr_decay_every
        self.batch_size = batch_size
        self.epochs = epochs
        self.clip_norm = clip_norm
        self.point_lr_mult = point_lr_mult
        self.seed = seed
        self.verbose = verbose

    # -- configuration ---------------------------------------------------
    def build_config(self, input_width: int) -> DecoderConfig:
        overrides = {k: getattr(self, k) for k in _CONFIG_KEYS if getattr(self, k) is not None}
        return DecoderConfig.preset(self.preset, n_classes=self.n_classes,
                                    input_width=input_width, **overrides)

    def loss_weights(self) -> LossWeights:
        return LossWeights(**{k: getattr(self, k) for k in _WEIGHT_KEYS})

    def base_lr(self) -> float:
        return PRESET_LR[self.preset] if self.lr is None else self.lr

    def learning_rate(self, epoch: int) -> float:
        """Base rate halved every ``lr_decay_every`` epochs (0 disables decay)."""
        if not self.lr_decay_every:
            return self.base_lr()
        return self.base_lr() * 0.5 ** (epoch // self.lr_decay_every)

    # -- training --------------------------------------------------------
    def initialize(self, input_width: int):
        self.config_ = self.build_config(input_width)
        self.model_ = PointTADModel(self.config_, seed=self.seed)
        self.optimizer_ = self._make_optimizer(self.model_)
        self.epoch_ = 0
        self.history_ = []
        return self

    def _make_optimizer(self, model):
        return AdamW(list(model.params), lr=self.base_lr(), weight_decay=self.weight_decay,
                     no_decay=(".norm.", "_norm.", "query.points"),
                     lr_mult={"query.points": self.point_lr_mult})

    def _prepare(self, X, y):
        X = check_windows(X, getattr(self, "config_", None) and self.config_.input_width)
        targets = check_targets(y, len(X), self.n_classes)
        n = self.config_.n_queries
        for i, t in enumerate(targets):
            if len(t) > n:
                raise CapacityError(f"window {i} holds {len(t)} instances but only {n} queries exist")
        Tp = X.shape[1] // self.config_.stride
        dense = np.stack([rasterize([ActionInstance(s, e, c) for (s, e), c in zip(t.segments, t.labels)],
                                    Tp, self.n_classes) for t in targets])
        return X, targets, dense

    def fit(self, X, y, callback=None):
        """Train from scratch for ``epochs`` epochs.

        ``callback(detector, record)`` is invoked after every epoch.
        """
        X = check_windows(X)
        self.initialize(X.shape[2])
        X, targets, dense = self._prepare(X, y)
        for _ in range(self.epochs):
            record = self._run_epoch(X, targets, dense)
            if callback is not None:
                callback(self, record)
        return self

    def partial_fit(self, X, y):
        """Run one more epoch (initialising on first use)."""
        if getattr(self, "model_", None) is None:
            self.initialize(check_windows(X).shape[2])
        X, targets, dense = self._prepare(X, y)
        self._run_epoch(X, targets, dense)
        return self

    def train_step(self, Xb, targets, dense_b, lr):
        weights = self.loss_weights()
        out = self.model_.forward(Xb)
        loss = total_loss(out.layers, targets, out.dense_logits, dense_b, weights)
        self.optimizer_.zero_grad()
        loss.total.backward()
        gnorm = clip_grad_norm(self.optimizer_.params, self.clip_norm) if self.clip_norm else None
        self.optimizer_.step(lr)
        comps = dict(loss.components)
        if gnorm is not None:
            comps["grad_norm"] = gnorm
        return comps

    def _run_epoch(self, X, targets, dense):
        epoch = self.epoch_
        lr = self.learning_rate(epoch)
        order = np.random.default_rng([self.seed, epoch]).permutation(len(X))
        t0 = time.perf_counter()
        sums, n_steps = {}, 0
        first = None
        for i in range(0, len(order), self.batch_size):
            idx = order[i:i + self.batch_size]
            comps = self.train_step(X[idx], [targets[j] for j in idx], dense[idx], lr)
            if first is None:
                first = comps["total"]
            for k, v in comps.items():
                sums[k] = sums.get(k, 0.0) + v
            n_steps += 1
        self.epoch_ += 1
        # wall-clock time stays out of the record so histories are reproducible
        record = {"epoch": epoch, "lr": lr, "steps": n_steps, "first_step_loss": first}
        record.update({k: v / n_steps for k, v in sums.items()})
        self.history_.append(record)
        if self.verbose:
            print(f"epoch {epoch:3d} lr {lr:.2e} loss {record['total']:.4f} "
                  f"loc {record['loc']:.4f} ce {record['ce']:.4f} ({time.perf_counter() - t0:.1f}s)")
        return record

    # -- inference -------------------------------------------------------
    def _forward(self, X, batch_size=32):
        check_is_fitted(self)
        X = check_windows(X, self.config_.input_width)
        logits, segs, dense = [], [], []
        with ag.no_grad():
            for i in range(0, len(X), batch_size):
                out = self.model_.forward(X[i:i + batch_size])
                final = out.layers[-1]
                logits.append(final.class_logits.data)
                segs.append(final.segments.data)
                dense.append(out.dense_logits.data)
        return np.concatenate(logits), np.concatenate(segs), np.concatenate(dense)

    def predict_raw(self, X):
        """(class probabilities incl. no-action (n, N_q, C+1), segments (n, N_q, 2), dense probs)."""
        logits, segs, dense = self._forward(X)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        prob = e / e.sum(axis=-1, keepdims=True)
        return prob, segs, 1.0 / (1.0 + np.exp(-dense))

    def predict(self, X, min_score: float = 0.0):
        """Per window, one scored instance for every (query, class) pair."""
        prob, segs, _ = self.predict_raw(X)
        return [self._instances(prob[i], segs[i], min_score) for i in range(len(prob))]

    def _instances(self, prob, segs, min_score, video_id=None):
        segs = np.clip(segs, 0.0, 1.0)
        out = []
        for q in range(prob.shape[0]):
            for c in range(self.n_classes):
                if prob[q, c] > min_score:
                    out.append(ActionInstance(segs[q, 0], segs[q, 1], c, float(prob[q, c]), video_id))
        return out

    def predict_dense(self, X):
        """Per-frame class probabilities (n, T', C) from the dense head."""
        return self.predict_raw(X)[2]

    def score(self, X, y):
        """Average detection mAP over tIoU 0.1:0.9, each window treated as a video."""
        preds = self.predict(X)
        gts = []
        flat = []
        for i, (p, insts) in enumerate(zip(preds, y)):
            for a in p:
                a.video_id = i
                flat.append(a)
            for t in insts:
                s, e, c = (t.start, t.end, t.class_id) if isinstance(t, ActionInstance) else t[:3]
                gts.append(ActionInstance(s, e, c, video_id=i))
        return detection_map(flat, gts).avg_map

    # -- persistence -----------------------------------------------------
    def save_checkpoint(self, path, extra_meta: dict | None = None):
        check_is_fitted(self)
        arrays = {f"param.{k}": v for k, v in self.model_.params.state_dict().items()}
        arrays.update(self.optimizer_.state_arrays())
        meta = {"kind": CHECKPOINT_KIND, "estimator": self.get_params(),
                "config": self.config_.to_dict(), "epoch": self.epoch_,
                "adam_step": self.optimizer_.step_count, "history": self.history_}
        meta.update(extra_meta or {})
        save_arrays(path, arrays, meta)

    @classmethod
    def load_checkpoint(cls, path):
        from .params import CheckpointError

        arrays, meta = load_arrays(path)
        if meta.get("kind") != CHECKPOINT_KIND:
            raise CheckpointError(f"{path}: not a detector checkpoint")
        est = cls(**meta["estimator"])
        est.config_ = DecoderConfig.from_dict(meta["config"])
        est.model_ = PointTADModel(est.config_, seed=est.seed)
        est.model_.params.load_state_dict(
            {k[len("param."):]: v for k, v in arrays.items() if k.startswith("param.")})
        est.optimizer_ = est._make_optimizer(est.model_)
        est.optimizer_.load_state_arrays(arrays, meta["adam_step"])
        est.epoch_ = meta["epoch"]
        est.history_ = meta.get("history", [])
        return est


class DenseToSparse(TransformerMixin, BaseEstimator):
    """Convert per-frame class probabilities into scored instances.

    ``fit`` learns per-class duration statistics from training annotations;
    ``transform`` maps each (T', C) grid to a list of instances.
    """

    def __init__(self, n_classes=5, bin_thresh=0.5):
        self.n_classes = n_classes
        self.bin_thresh = bin_thresh

    def fit(self, X, y):
        """``X`` gives the frame count of each annotated sequence, ``y`` its instances."""
        n_frames = [x if np.isscalar(x) else np.asarray(x).shape[0] for x in X]
        insts = [[a if isinstance(a, ActionInstance) else ActionInstance(*a[:3]) for a in seq] for seq in y]
        self.stats_ = ClassDurationStats.from_instances(insts, n_frames, self.n_classes)
        return self

    def set_stats(self, stats: ClassDurationStats):
        self.stats_ = stats
        return self

    def transform(self, X):
        if getattr(self, "stats_", None) is None:
            from sklearn.exceptions import NotFittedError
            raise NotFittedError("DenseToSparse needs fit() or set_stats() first")
        return [dense_to_sparse(x, self.stats_, self.bin_thresh) for x in X]
