"""Query-point action decoder.

Shapes used throughout (B = batch of windows):

* raw observations ``(B, T, F)`` -> encoded features ``(B, T', D)``
* query vectors ``(B, N_q, D)`` and query points ``(B, N_q, N_s)``
* point features ``(B, N_q, N_s, D)``

Deformable sub-point offsets live in feature-index units; a normalised time
``t`` maps to the index ``t * T' - 0.5`` so that row ``i`` sits at the centre
of frame ``i``.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from . import geometry
from .autograd import Tensor
from .params import ParameterStore

REPRESENTATIONS = ("points", "segment")


@dataclass
class DecoderConfig:
    n_queries: int = 8
    n_points: int = 7
    n_layers: int = 2
    d_model: int = 64
    d_bottleneck: int = 16
    n_heads: int = 4
    n_subpoints: int = 4
    n_classes: int = 5
    input_width: int = 20
    stride: int = 1
    representation: str = "points"
    frame_mixing: bool = True
    channel_mixing: bool = True
    roi_samples: int = 2
    query_std: float = 1.0
    mix_out_scale: float = 1.0
    reg_out_scale: float = 0.1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        errors = []
        if self.n_queries < 1:
            errors.append("n_queries must be >= 1")
        if self.n_points < 2:
            errors.append("n_points must be >= 2")
        if self.n_layers < 1:
            errors.append("n_layers must be >= 1")
        if self.n_heads < 1 or self.d_model % self.n_heads:
            errors.append(f"d_model={self.d_model} must be divisible by n_heads={self.n_heads}")
        if not 1 <= self.d_bottleneck <= self.d_model:
            errors.append("d_bottleneck must lie in [1, d_model]")
        if self.n_subpoints < 1:
            errors.append("n_subpoints must be >= 1")
        if self.n_classes < 1 or self.input_width < 1 or self.stride < 1:
            errors.append("n_classes, input_width and stride must be positive")
        if self.representation not in REPRESENTATIONS:
            errors.append(f"representation must be one of {REPRESENTATIONS}")
        if not (self.frame_mixing or self.channel_mixing):
            errors.append("at least one of frame_mixing / channel_mixing must be enabled")
        if errors:
            raise ValueError("invalid DecoderConfig: " + "; ".join(errors))

    @classmethod
    def preset(cls, name: str, **overrides) -> "DecoderConfig":
        if name not in PRESETS:
            raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
        return cls(**{**PRESETS[name], **overrides})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DecoderConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown DecoderConfig fields: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "DecoderConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


PRESETS = {
    "desk": dict(n_queries=8, n_points=7, n_layers=2, d_model=64, d_bottleneck=16,
                 n_heads=4, n_subpoints=4),
    "paper": dict(n_queries=48, n_points=21, n_layers=4, d_model=256, d_bottleneck=64,
                  n_heads=8, n_subpoints=4),
}


@dataclass
class LayerOutput:
    """Predictions of one decoder layer.

    ``points`` holds the refined query points (or segments for the segment
    baseline); ``segments`` the pseudo segments used for matching and output.
    """

    class_logits: Tensor
    segments: Tensor
    points: Tensor


@dataclass
class ForwardOutput:
    layers: list
    dense_logits: Tensor
    features: Tensor
    init_points: np.ndarray
    attention: list = field(default_factory=list)


def _glorot(rng, fan_in, fan_out, scale=1.0):
    bound = scale * math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, (fan_in, fan_out))


class PointTADModel:
    """Parameters plus the forward computation of the detector."""

    def __init__(self, config: DecoderConfig, seed: int = 0, identity_encoder: bool = False):
        self.config = config
        self.params = ParameterStore()
        self.local_mask = geometry.canonical_local_mask(config.n_points)
        self._init(np.random.default_rng(seed), identity_encoder)

    # -- construction ----------------------------------------------------
    def _linear(self, rng, name, fan_in, fan_out, scale=1.0, zero=False):
        w = np.zeros((fan_in, fan_out)) if zero else _glorot(rng, fan_in, fan_out, scale)
        self.params.add(f"{name}.w", w)
        self.params.add(f"{name}.b", np.zeros(fan_out))

    def _norm(self, name, width):
        self.params.add(f"{name}.g", np.ones(width))
        self.params.add(f"{name}.b", np.zeros(width))

    def _init(self, rng, identity_encoder):
        c = self.config
        D, Dp, Ns, K = c.d_model, c.d_bottleneck, c.n_points, c.n_subpoints
        if identity_encoder:
            if c.input_width != D:
                raise ValueError("identity encoder needs input_width == d_model")
            for name in ("enc.l1", "enc.l2"):
                self.params.add(f"{name}.w", np.eye(D))
                self.params.add(f"{name}.b", np.zeros(D))
        else:
            self._linear(rng, "enc.l1", c.input_width, D)
            self._linear(rng, "enc.l2", D, D)

        self.params.add("query.vectors", rng.standard_normal((c.n_queries, D)) * c.query_std)
        if c.representation == "points":
            self.params.add("query.points", np.full((c.n_queries, Ns), 0.5))
        else:
            self.params.add("query.points", np.tile([0.0, 1.0], (c.n_queries, 1)))

        n_reg = Ns if c.representation == "points" else 2
        for l in range(c.n_layers):
            p = f"layer{l}"
            for proj in ("q", "k", "v", "o"):
                self._linear(rng, f"{p}.attn.{proj}", D, D)
            self._norm(f"{p}.attn.norm", D)
            if c.representation == "points":
                self.params.add(f"{p}.deform.offset.w", np.zeros((D, K)))
                self.params.add(f"{p}.deform.offset.b", np.arange(1, K + 1, dtype=np.float64))
                self.params.add(f"{p}.deform.weight.w", np.zeros((D, K)))
                self.params.add(f"{p}.deform.weight.b", np.zeros(K))
            width = 0
            if c.frame_mixing:
                self._linear(rng, f"{p}.mix.frame", D, Ns * Ns)
                self._norm(f"{p}.mix.frame_norm", Ns)
                width += Ns * D
            if c.channel_mixing:
                self._linear(rng, f"{p}.mix.ch1", D, D * Dp)
                self._norm(f"{p}.mix.ch1_norm", Dp)
                self._linear(rng, f"{p}.mix.ch2", D, Dp * D)
                self._norm(f"{p}.mix.ch2_norm", D)
                width += Ns * D
            self._linear(rng, f"{p}.mix.out", width, D, scale=c.mix_out_scale)
            self._linear(rng, f"{p}.cls.hidden", D, D)
            self._norm(f"{p}.cls.norm", D)
            self._linear(rng, f"{p}.cls.out", D, c.n_classes + 1)
            self._linear(rng, f"{p}.reg.hidden", D, D)
            self._norm(f"{p}.reg.norm", D)
            self._linear(rng, f"{p}.reg.out", D, n_reg, scale=c.reg_out_scale)
        self._linear(rng, "dense", D, c.n_classes)

    def _lin(self, x, name):
        return ag.linear(x, self.params[f"{name}.w"], self.params[f"{name}.b"])

    def _ln(self, x, name, axis=-1):
        return ag.layer_norm(x, self.params[f"{name}.g"], self.params[f"{name}.b"], axis=axis)

    # -- building blocks -------------------------------------------------
    def encode_features(self, raw) -> Tensor:
        """Two affine+ReLU layers mapping F -> D, then mean-pooling by ``stride``."""
        raw = ag.as_tensor(raw)
        if raw.shape[-1] != self.config.input_width:
            raise ValueError(
                f"raw feature width {raw.shape[-1]} != configured input_width {self.config.input_width}")
        squeeze = raw.ndim == 2
        if squeeze:
            raw = ag.reshape(raw, (1,) + raw.shape)
        h = ag.relu(self._lin(raw, "enc.l1"))
        x = ag.relu(self._lin(h, "enc.l2"))
        s = self.config.stride
        if s > 1:
            B, T, D = x.shape
            n = T // s
            x = ag.mean(ag.reshape(x[:, : n * s], (B, n, s, D)), axis=2)
        if x.shape[1] < 2:
            raise ValueError("encoded sequence needs at least 2 frames")
        return ag.reshape(x, x.shape[1:]) if squeeze else x

    def self_attend_queries(self, q: Tensor, layer: int, return_weights: bool = False):
        """Multi-head self-attention over queries with residual and layer norm."""
        p = f"layer{layer}.attn"
        B, N, D = q.shape
        H = self.config.n_heads
        dh = D // H

        def heads(x):
            return ag.swapaxes(ag.reshape(x, (B, N, H, dh)), 1, 2)

        Q, K, V = (heads(self._lin(q, f"{p}.{n}")) for n in ("q", "k", "v"))
        att = ag.softmax(ag.matmul(Q, ag.swapaxes(K, -1, -2)) / math.sqrt(dh), axis=-1)
        mixed = ag.reshape(ag.swapaxes(ag.matmul(att, V), 1, 2), (B, N, D))
        out = self._ln(q + self._lin(mixed, f"{p}.o"), f"{p}.norm")
        return (out, att.data) if return_weights else out

    def subpoint_params(self, q: Tensor, layer: int):
        """Per-query sub-point offsets (index units) and softmax weights, each (B, N_q, K)."""
        p = f"layer{layer}.deform"
        return self._lin(q, f"{p}.offset"), ag.softmax(self._lin(q, f"{p}.weight"), axis=-1)

    def sample_points(self, X: Tensor, points: Tensor, offsets: Tensor, weights: Tensor) -> Tensor:
        """Weighted sum of interpolated features at ``point + offset_k``.

        X (B, T', D), points (B, N_q, N_s), offsets/weights (B, N_q, K)
        -> (B, N_q, N_s, D).
        """
        B, T, D = X.shape
        _, Nq, Ns = points.shape
        K = offsets.shape[-1]
        centre = points * float(T) - 0.5
        pos = ag.reshape(centre, (B, Nq, Ns, 1)) + ag.reshape(offsets, (B, Nq, 1, K))
        sampled = ag.interp1d(X, ag.reshape(pos, (B, Nq * Ns * K)))
        sampled = ag.reshape(sampled, (B, Nq, Ns, K, D))
        return ag.tsum(sampled * ag.reshape(weights, (B, Nq, 1, K, 1)), axis=3)

    def deformable_point_feature(self, X: Tensor, t, q_row: Tensor, layer: int = 0) -> Tensor:
        """Point feature for one normalised time ``t`` and one query vector (D,)."""
        X = ag.as_tensor(X)
        q = ag.reshape(ag.as_tensor(q_row), (1, 1, -1))
        offsets, weights = self.subpoint_params(q, layer)
        pts = ag.reshape(ag.as_tensor(t), (1, 1, 1))
        out = self.sample_points(ag.reshape(X, (1,) + X.shape), pts, offsets, weights)
        return ag.reshape(out, (X.shape[-1],))

    def roi_features(self, X: Tensor, segments: Tensor) -> Tensor:
        """Temporal RoI align: N_s uniform bins per segment, each average-pooled
        from ``roi_samples`` interpolated samples. Returns (B, N_q, N_s, D)."""
        B, T, D = X.shape
        _, Nq, _ = segments.shape
        Ns, S = self.config.n_points, self.config.roi_samples
        frac = ((np.arange(Ns)[:, None] + (np.arange(S)[None, :] + 0.5) / S) / Ns).reshape(-1)
        start = ag.reshape(segments[..., 0], (B, Nq, 1))
        dur = ag.reshape(segments[..., 1] - segments[..., 0], (B, Nq, 1))
        times = start + dur * frac
        sampled = ag.interp1d(X, ag.reshape(times * float(T) - 0.5, (B, Nq * Ns * S)))
        return ag.mean(ag.reshape(sampled, (B, Nq, Ns, S, D)), axis=3)

    def adaptive_mixing(self, x: Tensor, q: Tensor, layer: int) -> Tensor:
        """Query-conditioned frame and channel mixing of stacked point features,
        run in parallel, flattened, projected to D and added to ``q``.

        x (B, N_q, N_s, D), q (B, N_q, D) -> (B, N_q, D).
        """
        p = f"layer{layer}.mix"
        c = self.config
        B, Nq, Ns, D = x.shape
        Dp = c.d_bottleneck
        branches = []
        if c.frame_mixing:
            Mf = ag.reshape(self._lin(q, f"{p}.frame"), (B, Nq, Ns, Ns))
            xf = ag.relu(self._ln(ag.matmul(ag.swapaxes(x, -1, -2), Mf), f"{p}.frame_norm"))
            branches.append(ag.swapaxes(xf, -1, -2))
        if c.channel_mixing:
            M1 = ag.reshape(self._lin(q, f"{p}.ch1"), (B, Nq, D, Dp))
            M2 = ag.reshape(self._lin(q, f"{p}.ch2"), (B, Nq, Dp, D))
            h = ag.relu(self._ln(ag.matmul(x, M1), f"{p}.ch1_norm"))
            branches.append(ag.relu(self._ln(ag.matmul(h, M2), f"{p}.ch2_norm")))
        mixed = branches[0] if len(branches) == 1 else ag.concat(branches, axis=-1)
        flat = ag.reshape(mixed, (B, Nq, -1))
        return q + self._lin(flat, f"{p}.out")

    def heads(self, q: Tensor, layer: int):
        p = f"layer{layer}"
        hc = ag.relu(self._ln(self._lin(q, f"{p}.cls.hidden"), f"{p}.cls.norm"))
        hr = ag.relu(self._ln(self._lin(q, f"{p}.reg.hidden"), f"{p}.reg.norm"))
        return self._lin(hc, f"{p}.cls.out"), self._lin(hr, f"{p}.reg.out")

    def predict_dense_scores(self, X: Tensor) -> Tensor:
        """Per-frame multi-label class logits (sigmoid is applied by consumers)."""
        return self._lin(X, "dense")

    # -- full pass -------------------------------------------------------
    def initial_state(self, batch: int):
        zeros = Tensor(np.zeros((batch, 1, 1)))
        return self.params["query.points"] + zeros, self.params["query.vectors"] + zeros

    def decoder_forward(self, X: Tensor, points: Tensor | None = None, q: Tensor | None = None,
                        keep_attention: bool = False):
        """Run all decoder layers; returns (list of LayerOutput, attention maps)."""
        c = self.config
        B = X.shape[0]
        if X.shape[-1] != c.d_model:
            raise ValueError(f"feature width {X.shape[-1]} != d_model {c.d_model}")
        if points is None or q is None:
            p0, q0 = self.initial_state(B)
            points = p0 if points is None else points
            q = q0 if q is None else q
        if q.shape[-1] != c.d_model:
            raise ValueError(f"query width {q.shape[-1]} != d_model {c.d_model}")
        outputs, attention = [], []
        for layer in range(c.n_layers):
            if keep_attention:
                q, att = self.self_attend_queries(q, layer, return_weights=True)
                attention.append(att)
            else:
                q = self.self_attend_queries(q, layer)
            if c.representation == "points":
                offsets, weights = self.subpoint_params(q, layer)
                feats = self.sample_points(X, points, offsets, weights)
            else:
                feats = self.roi_features(X, points)
            q = self.adaptive_mixing(feats, q, layer)
            logits, deltas = self.heads(q, layer)
            if c.representation == "points":
                refined = geometry.refine_points(points, deltas)
                segments = geometry.partial_minmax_transform(refined, self.local_mask)
            else:
                refined = geometry.refine_segments(points, deltas)
                segments = refined
            outputs.append(LayerOutput(logits, segments, refined))
            points = refined
        return outputs, attention

    def forward(self, raw, keep_attention: bool = False) -> ForwardOutput:
        X = self.encode_features(raw)
        if X.ndim == 2:
            X = ag.reshape(X, (1,) + X.shape)
        layers, attention = self.decoder_forward(X, keep_attention=keep_attention)
        return ForwardOutput(layers=layers, dense_logits=self.predict_dense_scores(X),
                             features=X, init_points=self.params["query.points"].data.copy(),
                             attention=attention)
