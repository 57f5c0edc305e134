"""Central finite-difference checks for every differentiable op."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autograd as ag
from .autograd import Tensor

STEP = 1e-5
OP_TOLERANCE = 1e-4
MODEL_TOLERANCE = 1e-3


def numerical_grad(f: Callable[[], float], x: np.ndarray, step: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. the array ``x`` (mutated in place, then restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-8)
    return float(num / den)


def check_function(fn: Callable[..., Tensor], inputs: list[np.ndarray], seed: int = 0,
                   step: float = STEP) -> float:
    """Max relative error of d(sum(fn(*inputs) * R))/d(input) over all inputs.

    ``R`` is a fixed random projection so that outputs with constant sums
    (softmax, layer norm) still produce informative gradients.
    """
    rng = np.random.default_rng(seed)
    leaves = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    proj = rng.standard_normal(out.shape)
    (out * proj).sum().backward()

    worst = 0.0
    for leaf in leaves:
        def f():
            with ag.no_grad():
                return float((fn(*leaves).data * proj).sum())
        numeric = numerical_grad(f, leaf.data, step)
        worst = max(worst, relative_error(leaf.grad, numeric))
    return worst


@dataclass
class OpCase:
    name: str
    fn: Callable[..., Tensor]
    make_inputs: Callable[[np.random.Generator, tuple], list[np.ndarray]]
    shapes: tuple


def _rand(*shapes):
    return lambda rng, _: [rng.standard_normal(s) for s in shapes]


def _away_from_zero(shape):
    def make(rng, _):
        x = rng.standard_normal(shape)
        return [x + 0.1 * np.sign(x)]
    return make


def _positive(shape):
    return lambda rng, _: [rng.uniform(0.5, 2.0, shape)]


def _distinct_pair(shape):
    def make(rng, _):
        a = rng.standard_normal(shape)
        return [a, a + rng.choice([-1.0, 1.0], shape) * rng.uniform(0.1, 1.0, shape)]
    return make


def _interp_inputs(shape):
    lead, T, D, M = shape

    def make(rng, _):
        X = rng.standard_normal(lead + (T, D))
        # keep positions away from lattice points and the clamp edges
        pos = rng.integers(0, T - 1, lead + (M,)) + rng.uniform(0.1, 0.9, lead + (M,))
        return [X, pos]
    return make


def _cases() -> list[OpCase]:
    cases = []

    def case(name, fn, shapes, make):
        for s in shapes:
            cases.append(OpCase(name, fn, make(s), s))

    case("add", lambda a, b: a + b, [(3,), (2, 3), (2, 1, 4)],
         lambda s: (lambda rng, _: [rng.standard_normal(s), rng.standard_normal(s[-1:])]))
    case("sub", lambda a, b: a - b, [(3,), (2, 3), (2, 2, 2)], lambda s: _rand(s, s))
    case("mul", lambda a, b: a * b, [(3,), (2, 3), (3, 1, 2)],
         lambda s: (lambda rng, _: [rng.standard_normal(s), rng.standard_normal(s)]))
    case("div", lambda a, b: a / b, [(3,), (2, 3), (2, 2, 2)],
         lambda s: (lambda rng, _: [rng.standard_normal(s), rng.uniform(0.5, 2.0, s)]))
    case("neg", lambda a: -a, [(3,), (2, 3), (2, 2, 2)], lambda s: _rand(s))
    case("pow", lambda a: a ** 3, [(3,), (2, 3), (2, 2, 2)], lambda s: _rand(s))
    case("exp", ag.exp, [(3,), (2, 3), (2, 2, 2)], lambda s: _rand(s))
    case("log", ag.log, [(3,), (2, 3), (2, 2, 2)], _positive)
    case("relu", ag.relu, [(5,), (3, 4), (2, 3, 2)], _away_from_zero)
    case("abs", ag.absolute, [(5,), (3, 4), (2, 3, 2)], _away_from_zero)
    case("sigmoid", ag.sigmoid, [(3,), (2, 3), (2, 2, 2)], lambda s: _rand(s))
    case("minimum", ag.minimum, [(4,), (2, 3), (2, 2, 2)], _distinct_pair)
    case("maximum", ag.maximum, [(4,), (2, 3), (2, 2, 2)], _distinct_pair)
    case("clip", lambda a: ag.clip(a, -0.5, 0.5), [(6,), (3, 4), (2, 3, 2)],
         lambda s: (lambda rng, _: [rng.uniform(-1, 1, s) + 0.05]))
    case("sum", lambda a: ag.tsum(a, axis=-1), [(3,), (2, 3), (2, 3, 4)], lambda s: _rand(s))
    case("mean", lambda a: ag.mean(a, axis=0), [(3,), (2, 3), (2, 3, 4)], lambda s: _rand(s))
    case("amax", lambda a: ag.amax(a, axis=-1), [(4,), (3, 5), (2, 3, 4)], lambda s: _rand(s))
    case("amin", lambda a: ag.amin(a, axis=-1), [(4,), (3, 5), (2, 3, 4)], lambda s: _rand(s))
    case("reshape", lambda a: ag.reshape(a, (-1,)), [(3,), (2, 3), (2, 3, 4)], lambda s: _rand(s))
    case("transpose", lambda a: ag.transpose(a, None), [(3,), (2, 3), (2, 3, 4)], lambda s: _rand(s))
    case("swapaxes", lambda a: ag.swapaxes(a, 0, -1), [(3,), (2, 3), (2, 3, 4)], lambda s: _rand(s))
    case("getitem", lambda a: a[..., [0, 0, -1]], [(3,), (2, 3), (2, 3, 4)], lambda s: _rand(s))
    case("concat", lambda a, b: ag.concat([a, b], axis=-1), [(2, 3), (2, 5), (3, 2, 2)],
         lambda s: _rand(s, s[:-1] + (s[-1] + 1,)))
    case("matmul", ag.matmul, [(2, 3), (4, 4), (2, 3, 5)],
         lambda s: (lambda rng, _: [rng.standard_normal(s), rng.standard_normal(s[:-2] + (s[-1], 2))]))
    case("linear", ag.linear, [(3,), (2, 4), (2, 3, 5)],
         lambda s: (lambda rng, _: [rng.standard_normal(s), rng.standard_normal((s[-1], 3)),
                                    rng.standard_normal(3)]))
    case("softmax", lambda a: ag.softmax(a, axis=-1), [(4,), (3, 4), (2, 3, 4)], lambda s: _rand(s))
    case("log_softmax", lambda a: ag.log_softmax(a, axis=-1), [(4,), (3, 4), (2, 3, 4)],
         lambda s: _rand(s))
    case("layer_norm", lambda x, g, b: ag.layer_norm(x, g, b, axis=-1),
         [(4,), (3, 4), (2, 3, 5)],
         lambda s: (lambda rng, _: [rng.standard_normal(s), rng.uniform(0.5, 1.5, s[-1:]),
                                    rng.standard_normal(s[-1:])]))
    case("layer_norm_axis0", lambda x, g, b: ag.layer_norm(x, g, b, axis=0),
         [(3,), (4, 2), (3, 2, 2)],
         lambda s: (lambda rng, _: [rng.standard_normal(s), rng.uniform(0.5, 1.5, s[:1]),
                                    rng.standard_normal(s[:1])]))
    case("bce_with_logits", lambda z: ag.bce_with_logits(z, np.linspace(0, 1, z.size).reshape(z.shape)),
         [(3,), (2, 3), (2, 2, 2)], lambda s: _rand(s))
    case("interp1d", ag.interp1d, [((), 5, 3, 4), ((2,), 4, 2, 3), ((2, 2), 6, 3, 2)], _interp_inputs)
    case("bilinear_interp_1d", ag.bilinear_interp_1d, [(4, 3), (6, 2), (3, 5)],
         lambda s: (lambda rng, _: [rng.standard_normal(s),
                                    np.array(rng.integers(0, s[0] - 1) + rng.uniform(0.1, 0.9))]))
    return cases


OP_CASES = _cases()


def registered_ops() -> list[str]:
    return sorted({c.name for c in OP_CASES})


def run_op_checks(tolerance: float = OP_TOLERANCE, corrupt: str | None = None) -> list[dict]:
    """Run every registered op case. ``corrupt`` names an op whose gradient is
    deliberately scaled by 1.5 (a negative control)."""
    rng = np.random.default_rng(1234)
    results = []
    for i, c in enumerate(OP_CASES):
        inputs = c.make_inputs(rng, c.shapes)
        fn = c.fn
        if corrupt == c.name:
            fn = _corrupted(c.fn)
        err = check_function(fn, inputs, seed=i)
        results.append({"op": c.name, "shape": repr(c.shapes), "rel_error": err,
                        "passed": bool(err < tolerance)})
    return results


def _corrupted(fn):
    def wrapped(*xs):
        out = fn(*xs)
        scaled = ag._node(out.data, (out,), lambda g: (1.5 * g,), "corrupted")
        return scaled
    return wrapped


TINY_MODEL = dict(n_queries=2, n_points=3, n_layers=1, d_model=8, d_bottleneck=4, n_heads=2,
                  n_subpoints=2, n_classes=3, input_width=5)


def tiny_model_problem(seed: int = 0):
    """A tiny detector, one window and its target, with query points moved off ties."""
    from .decoder import DecoderConfig, PointTADModel
    from .matching import Target

    rng = np.random.default_rng(seed)
    cfg = DecoderConfig(**TINY_MODEL)
    model = PointTADModel(cfg, seed=seed)
    # distinct points keep min/max away from their kinks
    model.params["query.points"].data[:] = np.sort(rng.uniform(0.15, 0.85, (2, 3)), axis=1)
    for name in model.params.names():
        # norm biases off zero so no ReLU input sits exactly on its kink
        if name.startswith("layer0.deform") or name.endswith(("reg.out.w", "norm.b")):
            model.params[name].data[:] = 0.1 * rng.standard_normal(model.params[name].shape)
    raw = rng.standard_normal((1, 12, cfg.input_width))
    target = Target([[0.2, 0.55]], [1])
    dense = np.zeros((1, 12, cfg.n_classes))
    dense[0, 2:7, 1] = 1.0
    return model, raw, [target], dense


def run_model_check(seed: int = 0, step: float = STEP) -> tuple[float, dict]:
    """Relative error of d(total_loss)/d(params) on the tiny model.

    Returns the error over the concatenated gradient of all parameters and
    the per-parameter errors. Some parameters (key biases) have an
    identically zero gradient, so only the global error is meaningful as a
    pass criterion.
    """
    from .matching import LossWeights, total_loss

    model, raw, targets, dense = tiny_model_problem(seed)
    weights = LossWeights()

    def loss():
        out = model.forward(raw)
        return total_loss(out.layers, targets, out.dense_logits, dense, weights).total

    model.params.zero_grad()
    loss().backward()
    def f():
        with ag.no_grad():
            return float(loss().data)

    analytic, numeric, errors = [], [], {}
    for p in model.params:
        num = numerical_grad(f, p.data, step)
        errors[p.name] = relative_error(p.grad, num)
        analytic.append(p.grad.ravel())
        numeric.append(num.ravel())
    return relative_error(np.concatenate(analytic), np.concatenate(numeric)), errors
