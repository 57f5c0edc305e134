import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from pointtad.data import SyntheticConfig, generate_dataset
from pointtad.estimator import DenseToSparse, PointTADDetector
from pointtad.matching import CapacityError
from pointtad.params import CheckpointError, load_arrays, save_arrays
from pointtad.pipeline import make_windows, windows_to_arrays
from pointtad.structures import ActionInstance

TINY = dict(n_queries=4, n_points=5, n_layers=2, d_model=16, d_bottleneck=4, n_heads=2,
            n_subpoints=2, batch_size=4, lr=1e-3)


def windows(n_clips=2, seed=0, length=64):
    ds = generate_dataset(SyntheticConfig(n_train=n_clips, n_val=0, n_test=0, clip_length=length,
                                          instances_per_clip=(2, 4), seed=seed))
    return windows_to_arrays(make_windows(ds.splits["train"], 32, 0.0))


@pytest.fixture(scope="module")
def data():
    return windows()


def test_params_round_trip_and_clone():
    est = PointTADDetector(**TINY, epochs=3)
    assert est.get_params()["n_queries"] == 4
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(epochs=7)
    assert est.epochs == 7


def test_preset_fallbacks():
    est = PointTADDetector()
    cfg = est.build_config(20)
    assert (cfg.n_queries, cfg.n_points, cfg.n_layers) == (8, 7, 2)
    assert est.base_lr() == 1e-3
    assert PointTADDetector(preset="paper").base_lr() == 2e-4
    assert PointTADDetector(n_points=9).build_config(20).n_points == 9


def test_learning_rate_schedule():
    est = PointTADDetector(lr=0.01, lr_decay_every=2)
    assert [est.learning_rate(e) for e in range(5)] == [0.01, 0.01, 0.005, 0.005, 0.0025]
    assert PointTADDetector(lr=0.01, lr_decay_every=0).learning_rate(9) == 0.01


def test_unfitted_predict_raises(data):
    with pytest.raises(NotFittedError):
        PointTADDetector(**TINY).predict(data[0])


def test_fit_predict_shapes(data):
    X, y = data
    est = PointTADDetector(**TINY, epochs=2).fit(X, y)
    assert len(est.history_) == 2 and est.epoch_ == 2
    preds = est.predict(X)
    assert len(preds) == len(X)
    assert all(len(p) == 4 * 5 for p in preds)
    for a in preds[0]:
        assert 0.0 <= a.start <= a.end <= 1.0 and 0.0 < a.score < 1.0
    prob, segs, dense = est.predict_raw(X)
    np.testing.assert_allclose(prob.sum(-1), 1.0)
    assert dense.shape == (len(X), X.shape[1], 5)
    assert 0.0 <= est.score(X, y) <= 1.0


def test_record_fields(data):
    est = PointTADDetector(**TINY, epochs=1).fit(*data)
    (rec,) = est.history_
    assert {"epoch", "lr", "steps", "first_step_loss", "total", "loc", "ce", "dense"} <= set(rec)
    assert rec["steps"] == int(np.ceil(len(data[0]) / 4))


def test_same_seed_same_history(data):
    a = PointTADDetector(**TINY, epochs=2, seed=3).fit(*data)
    b = PointTADDetector(**TINY, epochs=2, seed=3).fit(*data)
    assert a.history_ == b.history_
    c = PointTADDetector(**TINY, epochs=2, seed=4).fit(*data)
    assert c.history_ != a.history_


def test_capacity_error_names_window(data):
    X, _ = data
    y = [[(0.1 * i, 0.1 * i + 0.05, 0) for i in range(5)]] + [[] for _ in range(len(X) - 1)]
    with pytest.raises(CapacityError, match="window 0"):
        PointTADDetector(**TINY, epochs=1).fit(X, y)


@pytest.mark.parametrize("bad", [[[(0.5, 0.2, 0)]], [[(0.1, 0.2, 9)]]])
def test_invalid_targets(bad, data):
    with pytest.raises(ValueError):
        PointTADDetector(**TINY, epochs=1).fit(data[0][:1], bad)


def test_invalid_windows():
    with pytest.raises(ValueError):
        PointTADDetector(**TINY).fit(np.zeros((2, 1, 20)), [[], []])
    with pytest.raises(ValueError):
        PointTADDetector(**TINY).fit(np.full((1, 8, 20), np.nan), [[]])


def test_feature_width_mismatch_at_predict(data):
    est = PointTADDetector(**TINY, epochs=1).fit(*data)
    with pytest.raises(ValueError, match="width"):
        est.predict(np.zeros((1, 32, 7)))


def test_checkpoint_round_trip(tmp_path, data):
    X, y = data
    est = PointTADDetector(**TINY, epochs=1).fit(X, y)
    est.save_checkpoint(tmp_path / "c.json")
    back = PointTADDetector.load_checkpoint(tmp_path / "c.json")
    assert back.get_params() == est.get_params()
    assert back.history_ == est.history_
    for p, q in zip(est.predict_raw(X), back.predict_raw(X)):
        np.testing.assert_array_equal(p, q)


def test_resume_equals_uninterrupted(tmp_path, data):
    X, y = data
    full = PointTADDetector(**TINY, epochs=3).fit(X, y)
    part = PointTADDetector(**TINY, epochs=2).fit(X, y)
    part.save_checkpoint(tmp_path / "c.json")
    resumed = PointTADDetector.load_checkpoint(tmp_path / "c.json").partial_fit(X, y)
    for name in full.model_.params.names():
        np.testing.assert_allclose(resumed.model_.params[name].data, full.model_.params[name].data,
                                   rtol=0, atol=1e-9)
    assert resumed.history_[-1]["total"] == pytest.approx(full.history_[-1]["total"], abs=1e-9)


def test_wrong_checkpoint_kind(tmp_path):
    save_arrays(tmp_path / "x.json", {"a": np.zeros(2)}, {"kind": "other"})
    with pytest.raises(CheckpointError):
        PointTADDetector.load_checkpoint(tmp_path / "x.json")


def test_checkpoint_arrays_are_exact(tmp_path):
    a = np.random.default_rng(0).standard_normal((3, 4))
    save_arrays(tmp_path / "x.json", {"a": a}, {"k": 1})
    arrays, meta = load_arrays(tmp_path / "x.json")
    np.testing.assert_array_equal(arrays["a"], a)
    assert meta["k"] == 1


def test_frozen_points_with_zero_lr_multiplier(data):
    est = PointTADDetector(**TINY, epochs=1, point_lr_mult=0.0).fit(*data)
    np.testing.assert_array_equal(est.model_.params["query.points"].data, 0.5)


def test_total_loss_strictly_decreases_over_50_steps():
    ds = generate_dataset(SyntheticConfig(n_train=1, n_val=0, n_test=0, clip_length=64,
                                          instances_per_clip=(2, 5), seed=0))
    X, y = windows_to_arrays(make_windows(ds.splits["train"], 64, 0.0))
    est = PointTADDetector(epochs=50, lr=1e-3, batch_size=1, lr_decay_every=0).fit(X, y)
    totals = [r["total"] for r in est.history_]
    assert len(totals) == 50 and all(r["steps"] == 1 for r in est.history_)
    assert all(b < a for a, b in zip(totals, totals[1:]))


def test_dense_to_sparse_estimator():
    y = [[(0.2, 0.6, 1)], [(0.0, 0.3, 1)]]
    tr = DenseToSparse(n_classes=2).fit([10, 10], y)
    np.testing.assert_allclose(tr.stats_.mean, [0.0, 3.5])
    dense = np.zeros((10, 2))
    dense[2:6, 1] = 1.0
    (out,) = tr.transform([dense])
    assert [(a.start, a.end, a.class_id) for a in out] == [(0.2, 0.6, 1)]
    with pytest.raises(NotFittedError):
        DenseToSparse().transform([dense])
    assert clone(tr).get_params() == tr.get_params()


def test_instances_accepted_as_targets(data):
    X, _ = data
    y = [[ActionInstance(0.1, 0.3, 0)] for _ in range(len(X))]
    PointTADDetector(**TINY, epochs=1).fit(X, y)
