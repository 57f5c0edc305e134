import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pointtad import autograd as ag
from pointtad.autograd import Parameter, Tensor
from pointtad.gradcheck import (MODEL_TOLERANCE, OP_TOLERANCE, check_function, registered_ops,
                                relative_error, run_model_check, run_op_checks)


def test_every_op_passes_finite_differences():
    results = run_op_checks()
    bad = [r for r in results if not r["passed"]]
    assert not bad, bad
    assert max(r["rel_error"] for r in results) < OP_TOLERANCE


def test_every_op_is_checked_at_three_shapes():
    results = run_op_checks()
    counts = {}
    for r in results:
        counts[r["op"]] = counts.get(r["op"], 0) + 1
    assert set(counts) == set(registered_ops())
    assert all(n == 3 for n in counts.values()), counts


def test_registry_covers_differentiable_ops():
    expected = {"add", "sub", "mul", "div", "neg", "pow", "exp", "log", "relu", "abs", "sigmoid",
                "minimum", "maximum", "clip", "sum", "mean", "amax", "amin", "reshape", "transpose",
                "swapaxes", "getitem", "concat", "matmul", "linear", "softmax", "log_softmax",
                "layer_norm", "bce_with_logits", "interp1d", "bilinear_interp_1d"}
    assert expected <= set(registered_ops())


@pytest.mark.parametrize("op", ["mul", "matmul", "softmax", "interp1d"])
def test_corrupted_gradient_is_caught(op):
    results = run_op_checks(corrupt=op)
    failed = {r["op"] for r in results if not r["passed"]}
    assert failed == {op}


def test_tiny_model_end_to_end():
    err, per_param = run_model_check(seed=0)
    assert err < MODEL_TOLERANCE
    assert "query.points" in per_param and "layer0.deform.offset.w" in per_param


def test_relative_error_frozen_values():
    assert relative_error(np.array([1.0, 0.0]), np.array([1.0, 0.0])) == 0.0
    assert relative_error(np.array([3.0, 4.0]), np.array([0.0, 0.0])) == 1.0
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0


def test_leaf_gradients_accumulate_across_backward_calls():
    x = Parameter(np.array([1.0, 2.0]), name="x")
    (x * x).sum().backward()
    (x * 3.0).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0 + 3.0, 4.0 + 3.0])


def test_shared_subexpression_counts_every_use():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = x * x
    (y + y).backward()
    assert x.grad == pytest.approx(12.0)


def test_non_scalar_backward_needs_explicit_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError):
        (x * 2.0).backward()


def test_no_grad_builds_no_graph():
    x = Tensor(np.ones(2), requires_grad=True)
    with ag.no_grad():
        y = x * 2.0
    assert not y.requires_grad
    assert ag.grad_enabled()


def test_broadcast_gradients_are_unbroadcast():
    a = Tensor(np.ones((3, 1)), requires_grad=True)
    b = Tensor(np.ones((1, 4)), requires_grad=True)
    (a * b).sum().backward()
    np.testing.assert_array_equal(a.grad, np.full((3, 1), 4.0))
    np.testing.assert_array_equal(b.grad, np.full((1, 4), 3.0))


def test_extreme_tie_rules():
    # all-equal inputs: the minimum credits its first element, the maximum its last
    x = Tensor(np.full(4, 0.5), requires_grad=True)
    ag.amin(x, -1).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 0.0, 0.0, 0.0])
    x = Tensor(np.full(4, 0.5), requires_grad=True)
    ag.amax(x, -1).backward()
    np.testing.assert_array_equal(x.grad, [0.0, 0.0, 0.0, 1.0])


def test_getitem_scatters_repeated_indices():
    x = Tensor(np.arange(3.0), requires_grad=True)
    x[np.array([0, 0, 2])].sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])


def test_interp1d_frozen_values():
    X = np.array([[0.0, 10.0], [1.0, 20.0], [3.0, 40.0]])
    out = ag.interp1d(Tensor(X), Tensor(np.array([0.0, 0.5, 1.75, -3.0, 9.0])))
    np.testing.assert_allclose(out.data, [[0.0, 10.0], [0.5, 15.0], [2.5, 35.0],
                                          [0.0, 10.0], [3.0, 40.0]])


def test_layer_norm_frozen_values():
    x = Tensor(np.array([[1.0, 2.0, 3.0]]))
    out = ag.layer_norm(x, Tensor(np.ones(3)), Tensor(np.zeros(3)), eps=0.0)
    np.testing.assert_allclose(out.data, [[-np.sqrt(1.5), 0.0, np.sqrt(1.5)]])


def test_shape_mismatch_raises():
    with pytest.raises(ag.ShapeError):
        ag.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 3), st.integers(2, 5)),
              elements=st.floats(-3, 3)))
def test_softmax_gradient_property(x):
    assert check_function(lambda t: ag.softmax(t, axis=-1), [x]) < OP_TOLERANCE


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.integers(2, 6), elements=st.floats(-5, 5)),
       arrays(np.float64, st.integers(2, 6), elements=st.floats(0, 1)))
def test_bce_matches_closed_form(logits, targets):
    n = min(len(logits), len(targets))
    z, y = logits[:n], targets[:n]
    got = ag.bce_with_logits(Tensor(z), y).data
    ref = np.maximum(z, 0) - z * y + np.log1p(np.exp(-np.abs(z)))
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12)
