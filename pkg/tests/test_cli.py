import json
import shutil
import subprocess
import sys
import xml.etree.ElementTree as ET

import jsonschema
import pytest

from pointtad import cli
from pointtad.data import load_dataset
from pointtad.gradcheck import registered_ops
from pointtad.metrics import TIOU_THRESHOLDS, write_instances_jsonl
from pointtad.structures import ActionInstance

RUN = {
    "data": {"clip_length": 64, "instances_per_clip": [2, 4], "n_train": 3, "n_val": 1, "n_test": 2},
    "model": {"n_queries": 4, "n_points": 5, "n_layers": 2, "d_model": 16, "d_bottleneck": 4,
              "n_heads": 2, "n_subpoints": 2, "batch_size": 4, "lr": 1e-3, "epochs": 2},
    "window_frames": 32,
    "train_overlap": 0.5,
}


def run(*argv):
    return cli.main([str(a) for a in argv])


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(RUN))
    assert run("generate", "--config", cfg, "--seed", 1, "--out", root / "data") == 0
    assert run("train", "--config", cfg, "--seed", 1, "--data", root / "data", "--out", root / "train") == 0
    return root, cfg


def test_generate_writes_dataset_and_config(workspace):
    root, _ = workspace
    ds = load_dataset(root / "data")
    assert [len(ds.splits[s]) for s in ("train", "val", "test")] == [3, 1, 2]
    saved = json.loads((root / "data" / cli.CONFIG_FILE).read_text())
    assert saved["seed"] == 1 and saved["window_frames"] == 32


@pytest.mark.parametrize("body", ['{"bogus": 1}', '{"data": {"clip_length": "x"}}',
                                  '{"model": {"preset": "huge"}}', '{ not json', '[1, 2]'])
def test_bad_config_exits_nonzero(tmp_path, body, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(body)
    assert run("generate", "--config", cfg, "--out", tmp_path / "o") == 2
    assert "error:" in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run("generate", "--config", tmp_path / "nope.json", "--out", tmp_path / "o") == 2


def test_train_artifacts_and_log_schema(workspace):
    root, _ = workspace
    out = root / "train"
    for name in (cli.CONFIG_FILE, cli.LOG_FILE, cli.CHECKPOINT_FILE, cli.BEST_CHECKPOINT_FILE):
        assert (out / name).exists()
    records = [json.loads(line) for line in (out / cli.LOG_FILE).read_text().splitlines()]
    assert [r["epoch"] for r in records] == [0, 1]
    for r in records:
        jsonschema.validate(r, cli.LOG_SCHEMA)
        assert r["val_avg_map"] is not None


def test_log_schema_rejects_unknown_fields():
    with pytest.raises(jsonschema.ValidationError):
        jsonschema.validate({"epoch": 0}, cli.LOG_SCHEMA)


def test_train_is_deterministic(workspace, tmp_path):
    root, cfg = workspace
    assert run("train", "--config", cfg, "--seed", 1, "--data", root / "data", "--out", tmp_path) == 0
    for name in (cli.LOG_FILE, cli.CHECKPOINT_FILE):
        assert (tmp_path / name).read_bytes() == (root / "train" / name).read_bytes()


def test_resume_extends_run_identically(workspace, tmp_path):
    root, cfg = workspace
    full = tmp_path / "full"
    part = tmp_path / "part"
    assert run("train", "--config", cfg, "--seed", 1, "--data", root / "data", "--out", full,
               "--epochs", 3) == 0
    shutil.copytree(root / "train", part)
    assert run("train", "--config", cfg, "--seed", 1, "--data", root / "data", "--out", part,
               "--epochs", 3, "--resume") == 0
    for name in (cli.LOG_FILE, cli.CHECKPOINT_FILE):
        assert (part / name).read_bytes() == (full / name).read_bytes()


def test_resume_with_other_config_is_rejected(workspace, tmp_path, capsys):
    root, cfg = workspace
    shutil.copytree(root / "train", tmp_path / "t")
    code = run("train", "--config", cfg, "--seed", 2, "--data", root / "data", "--out", tmp_path / "t",
               "--resume")
    assert code == 2
    assert "checkpoint format v1" in capsys.readouterr().err


def test_capacity_error_names_window(workspace, tmp_path, capsys):
    root, _ = workspace
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({**RUN, "model": {**RUN["model"], "n_queries": 1}}))
    assert run("train", "--config", cfg, "--seed", 1, "--data", root / "data", "--out", tmp_path / "o") == 2
    assert "@" in capsys.readouterr().err


def _eval(root, cfg, out, *extra):
    return run("eval", "--config", cfg, "--data", root / "data", "--out", out,
               "--checkpoint", root / "train" / cli.CHECKPOINT_FILE, *extra)


def test_eval_report(workspace, tmp_path):
    root, cfg = workspace
    assert _eval(root, cfg, tmp_path) == 0
    m = json.loads((tmp_path / cli.METRICS_FILE).read_text())
    assert list(m["per_threshold_map"]) == [f"{t:.1f}" for t in TIOU_THRESHOLDS]
    assert {"avg_map", "seg_map", "dense_baseline", "split", "beta", "gamma"} <= set(m)
    assert (tmp_path / cli.PREDICTIONS_FILE).exists()


def test_eval_is_byte_identical_across_runs_and_threads(workspace, tmp_path, monkeypatch):
    root, cfg = workspace
    assert _eval(root, cfg, tmp_path / "a") == 0
    monkeypatch.setenv("POINTTAD_THREADS", "3")
    assert _eval(root, cfg, tmp_path / "b") == 0
    for name in (cli.METRICS_FILE, cli.PREDICTIONS_FILE):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_bad_thread_count(workspace, tmp_path, monkeypatch):
    root, cfg = workspace
    monkeypatch.setenv("POINTTAD_THREADS", "zero")
    assert _eval(root, cfg, tmp_path) == 2


def test_oracle_predictions_score_one(workspace, tmp_path):
    root, cfg = workspace
    ds = load_dataset(root / "data")
    preds = [ActionInstance(a.start, a.end, a.class_id, 1.0, c.clip_id)
             for c in ds.splits["test"] for a in c.instances]
    write_instances_jsonl(tmp_path / "oracle.jsonl", preds)
    assert run("eval", "--config", cfg, "--data", root / "data", "--out", tmp_path,
               "--predictions", tmp_path / "oracle.jsonl", "--beta", 1.0) == 0
    m = json.loads((tmp_path / cli.METRICS_FILE).read_text())
    assert m["avg_map"] == 1.0
    assert all(v == 1.0 for v in m["per_threshold_map"].values())


def test_beta_zero_uses_dense_head_alone(workspace, tmp_path):
    root, cfg = workspace
    assert _eval(root, cfg, tmp_path / "a", "--beta", 0.0) == 0
    assert _eval(root, cfg, tmp_path / "b", "--beta", 0.0, "--gamma", 0.5) == 0
    a = json.loads((tmp_path / "a" / cli.METRICS_FILE).read_text())
    b = json.loads((tmp_path / "b" / cli.METRICS_FILE).read_text())
    assert a["beta"] == 0.0 and a["seg_map"] == b["seg_map"]


def test_eval_mismatch_gives_versioned_error(workspace, tmp_path, capsys):
    root, cfg = workspace
    other = tmp_path / "other.json"
    other.write_text(json.dumps({**RUN, "data": {**RUN["data"], "feature_width": 24, "n_classes": 6}}))
    assert run("generate", "--config", other, "--out", tmp_path / "d") == 0
    code = run("eval", "--config", cfg, "--data", tmp_path / "d", "--out", tmp_path / "o",
               "--checkpoint", root / "train" / cli.CHECKPOINT_FILE)
    assert code == 2
    assert "checkpoint format v1" in capsys.readouterr().err


def test_eval_needs_a_source(workspace, tmp_path):
    root, cfg = workspace
    assert run("eval", "--config", cfg, "--data", root / "data", "--out", tmp_path) == 2


def test_trained_beats_untrained_on_training_split(tmp_path):
    cfg = tmp_path / "c.json"
    body = {**RUN, "data": {"clip_length": 64, "instances_per_clip": [2, 4], "n_train": 1,
                            "n_val": 0, "n_test": 0},
            "window_frames": 64, "train_overlap": 0.0,
            "model": {"lr": 1e-3, "batch_size": 1, "epochs": 60, "lr_decay_every": 0}}
    cfg.write_text(json.dumps(body))
    assert run("generate", "--config", cfg, "--out", tmp_path / "d") == 0
    assert run("train", "--config", cfg, "--data", tmp_path / "d", "--out", tmp_path / "t") == 0
    ds = load_dataset(tmp_path / "d")
    det = cli.RunConfig.from_dict(body).detector()
    det.initialize(ds.config.feature_width)
    det.save_checkpoint(tmp_path / "untrained.json")
    scores = []
    for ckpt in (tmp_path / "untrained.json", tmp_path / "t" / cli.CHECKPOINT_FILE):
        assert run("eval", "--config", cfg, "--data", tmp_path / "d", "--out", tmp_path / "e",
                   "--checkpoint", ckpt, "--split", "train") == 0
        scores.append(json.loads((tmp_path / "e" / cli.METRICS_FILE).read_text())["avg_map"])
    assert scores[1] > scores[0]


def test_gradcheck_lists_every_op(tmp_path, capsys):
    assert run("gradcheck", "--out", tmp_path) == 0
    text = capsys.readouterr().out
    for name in registered_ops():
        assert name in text
    assert "tiny_model" in text
    m = json.loads((tmp_path / cli.METRICS_FILE).read_text())
    assert m["passed"] and {r["op"] for r in m["ops"]} == set(registered_ops())


def test_gradcheck_corrupted_gradient_fails(capsys):
    assert run("gradcheck", "--corrupt", "mul") == 1
    assert "FAIL  mul" in capsys.readouterr().out


def test_visualize_untrained(workspace, tmp_path):
    root, cfg = workspace
    clip_id = load_dataset(root / "data").splits["test"][0].clip_id
    assert run("visualize", "--config", cfg, "--data", root / "data", "--out", tmp_path,
               "--clip", clip_id) == 0
    traj = json.loads((tmp_path / cli.POINTS_FILE).read_text())
    L = RUN["model"]["n_layers"]
    for w in traj["windows"]:
        for q in w["queries"]:
            assert len(q["snapshots"]) == L + 1
            span = RUN["window_frames"] / traj["n_frames"]
            expect = (w["start_frame"] / traj["n_frames"]) + 0.5 * span
            assert all(t == pytest.approx(expect) for t in q["snapshots"][0])
    root_el = ET.parse(tmp_path / cli.SVG_FILE).getroot()
    assert root_el.tag.endswith("svg")


def test_visualize_trained_checkpoint(workspace, tmp_path):
    root, cfg = workspace
    clip_id = load_dataset(root / "data").splits["train"][0].clip_id
    assert run("visualize", "--config", cfg, "--data", root / "data", "--out", tmp_path,
               "--clip", clip_id, "--checkpoint", root / "train" / cli.CHECKPOINT_FILE) == 0
    ET.parse(tmp_path / cli.SVG_FILE)


def test_visualize_unknown_clip(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert run("visualize", "--config", cfg, "--data", root / "data", "--out", tmp_path,
               "--clip", "nope") == 2
    assert "unknown clip" in capsys.readouterr().err


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "pointtad.cli", "--help"], capture_output=True, text=True)
    assert out.returncode == 0
    for cmd in cli.COMMANDS:
        assert cmd in out.stdout
