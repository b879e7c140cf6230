import json
import subprocess
import sys

import numpy as np
import pytest

from lst.config import load
from lst.harness import main
from lst.metrics import body, read_records
from lst.model import load_checkpoint

from conftest import small_config

TINY = dict(
    n_classes=24, splits=(10, 7, 7), samples_per_class=60, pool_size=20, draw=10, select_z=5,
    inner_steps=6, retrain_steps=2, stages=2, pretrain_epochs=2, meta_iterations=2, eval_interval=1,
    val_episodes=2, test_episodes=3, distractors=1, sweep_distractors=(0, 2), sweep_retrain=(0, 2, 6),
    hidden=(16,), embed_dim=8,
)


@pytest.fixture(scope="module")
def tiny_cfg(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.cfg"
    path.write_text(small_config(**TINY).dumps())
    return path


def pipeline(cfg_path, out):
    for sub in ("pretrain", "meta-train", "meta-test", "ablate", "sweep-retrain", "sweep-distractors", "report"):
        assert main([sub, "--config", str(cfg_path), "--out", str(out)]) == 0, sub


@pytest.fixture(scope="module")
def two_runs(tiny_cfg, tmp_path_factory):
    a, b = tmp_path_factory.mktemp("a"), tmp_path_factory.mktemp("b")
    pipeline(tiny_cfg, a)
    pipeline(tiny_cfg, b)
    return a, b


def test_pipeline_writes_every_artifact(two_runs):
    out = two_runs[0]
    for rel in ("pretrain/checkpoint.backbone.npz", "meta-train/checkpoint.meta.npz", "meta-train/checkpoint.meta-best.npz",
                "meta-train/train-log.csv", "meta-test/metrics.csv", "ablate/metrics.jsonl", "ablate/comparisons.csv",
                "sweep-retrain/sweep.csv", "sweep-distractors/metrics.csv", "report/report.txt"):
        assert (out / rel).is_file(), rel
    manifest = json.loads((out / "ablate" / "run-manifest.json").read_text())
    assert manifest["subcommand"] == "ablate" and manifest["config_hash"]
    tags = [r.tag for r in read_records(out / "ablate" / "metrics.csv")]
    assert "fully-supervised" in tags and "recursive-hard-soft" in tags
    values = [r.sweep_value for r in read_records(out / "sweep-retrain" / "metrics.csv")]
    assert values == ["0", "2", "6"]


def test_same_config_gives_identical_bodies(two_runs):
    a, b = two_runs
    for rel in ("meta-test/metrics.csv", "ablate/metrics.csv", "sweep-retrain/metrics.csv",
                "sweep-distractors/metrics.csv", "meta-train/train-log.csv", "ablate/comparisons.csv"):
        assert body(a / rel) == body(b / rel), rel
    for rel in ("pretrain/checkpoint.backbone.npz", "meta-train/checkpoint.meta.npz"):
        x, y = load_checkpoint(a / rel), load_checkpoint(b / rel)
        assert all(np.array_equal(x.arrays[k], y.arrays[k]) for k in x.arrays)


def test_missing_prerequisite_exits_2(tiny_cfg, tmp_path, capsys):
    assert main(["meta-train", "--config", str(tiny_cfg), "--out", str(tmp_path)]) == 2
    err = capsys.readouterr().err
    assert "pretrain" in err and "error" in err
    assert main(["report", "--out", str(tmp_path)]) == 2


def test_malformed_config_exits_2(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("way = 5\nspeed = 3\n")
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path)]) == 2
    assert "bad.cfg:2" in capsys.readouterr().err
    assert main(["pretrain", "--seed", "-1", "--out", str(tmp_path)]) == 2
    assert main(["meta-test", "--episodes", "0", "--out", str(tmp_path)]) == 2


def test_config_mismatch_is_refused(two_runs, tiny_cfg, tmp_path, capsys):
    out = two_runs[0]
    rc = main(["meta-test", "--config", str(tiny_cfg), "--out", str(out), "--override", "embed_dim=4"])
    assert rc == 2
    assert "embed_dim" in capsys.readouterr().err
    # evaluation-only changes are allowed
    assert main(["meta-test", "--config", str(tiny_cfg), "--out", str(out), "--override", "test_episodes=2"]) == 0


def test_override_and_seed_reach_the_config(tiny_cfg, tmp_path):
    assert main(["pretrain", "--config", str(tiny_cfg), "--out", str(tmp_path), "--seed", "5", "--override", "pretrain_epochs=1"]) == 0
    ck = load_checkpoint(tmp_path / "pretrain" / "checkpoint.backbone.npz", "backbone")
    assert "seed = 5" in ck.config_text and "pretrain_epochs = 1" in ck.config_text
    assert load(tiny_cfg).seed == 0


def test_module_entry_point_help():
    res = subprocess.run([sys.executable, "-m", "lst", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "meta-train" in res.stdout
