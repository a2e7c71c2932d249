"""Command-level behaviour: pipelines, idempotence, flags, error reporting."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from sg3d.cli import main
from tests.test_synthetic import dir_digest


def run(argv):
    return main([str(a) for a in argv])


GEN_ARGS = ["--scenes", 14, "--classes", 4, "--predicates", 3, "--feature-dim", 8,
            "--nodes-min", 3, "--nodes-max", 4]
FAST_TRAIN = ["--h", 12, "--layers", 1, "--epochs", 3, "--patience", 3,
              "--geo-max-points", 16, "--seed", 0]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cliws")
    assert run(["gen", "--out", root / "train", "--seed", 1, *GEN_ARGS]) == 0
    assert run(["gen", "--out", root / "test", "--seed", 2, *GEN_ARGS,
                "--scenes", "6"]) == 0
    assert run(["stats", "--corpus", root / "train", "--out", root / "stats.json"]) == 0
    assert run(["train", "--corpus", root / "train", "--val-corpus", root / "test",
                "--out", root / "ckpt.bin", "--history", root / "history.json",
                *FAST_TRAIN]) == 0
    return root


def test_full_pipeline_populates_all_headline_metrics(workspace):
    out = workspace / "report.json"
    assert run(["eval", "--corpus", workspace / "test", "--checkpoint",
                workspace / "ckpt.bin", "--stats", workspace / "stats.json",
                "--out", out]) == 0
    report = json.loads(out.read_text())
    for key in ("recall_rel", "recall_obj", "recall_pred", "mrecall_obj",
                "mrecall_pred"):
        assert 0.0 <= report[key] <= 1.0
    assert sum(b["count"] for b in report["confidence_histogram"]) == report["counts"]["nodes"]


def test_gen_and_train_idempotent(workspace, tmp_path):
    assert run(["gen", "--out", tmp_path / "again", "--seed", 1, *GEN_ARGS]) == 0
    assert dir_digest(tmp_path / "again") == dir_digest(workspace / "train")

    assert run(["train", "--corpus", workspace / "train", "--val-corpus",
                workspace / "test", "--out", tmp_path / "ckpt2.bin", *FAST_TRAIN]) == 0
    a = hashlib.sha256((workspace / "ckpt.bin").read_bytes()).hexdigest()
    b = hashlib.sha256((tmp_path / "ckpt2.bin").read_bytes()).hexdigest()
    assert a == b


def test_eval_without_cr_never_reads_stats(workspace, tmp_path):
    # point --stats at a nonexistent file: with --no-cr it must not be touched
    assert run(["eval", "--corpus", workspace / "test", "--checkpoint",
                workspace / "ckpt.bin", "--stats", tmp_path / "missing.json",
                "--no-cr", "--out", tmp_path / "r.json"]) == 0


def test_fixed_alpha_one_matches_no_cr_metrics(workspace, tmp_path):
    assert run(["eval", "--corpus", workspace / "test", "--checkpoint",
                workspace / "ckpt.bin", "--stats", workspace / "stats.json",
                "--fixed-alpha", 1.0, "--out", tmp_path / "alpha1.json"]) == 0
    assert run(["eval", "--corpus", workspace / "test", "--checkpoint",
                workspace / "ckpt.bin", "--no-cr", "--out", tmp_path / "nocr.json"]) == 0
    a = json.loads((tmp_path / "alpha1.json").read_text())
    b = json.loads((tmp_path / "nocr.json").read_text())
    for key in ("recall_rel", "recall_obj", "recall_pred", "mrecall_obj",
                "mrecall_pred"):
        assert a[key] == b[key]


def test_ablate_zero_fraction_identity(workspace, tmp_path):
    out = tmp_path / "ablated.json"
    assert run(["ablate-stats", "--stats", workspace / "stats.json",
                "--drop-top-frac", 0.0, "--out", out]) == 0
    assert json.loads(out.read_text()) == json.loads((workspace / "stats.json").read_text())


def test_ablate_reduces_mass(workspace, tmp_path):
    out = tmp_path / "ablated50.json"
    assert run(["ablate-stats", "--stats", workspace / "stats.json",
                "--drop-top-frac", 0.5, "--out", out]) == 0
    before = np.asarray(json.loads((workspace / "stats.json").read_text())["triplet"]).sum()
    after = np.asarray(json.loads(out.read_text())["triplet"]).sum()
    assert after <= 0.5 * before


def test_predict_emits_both_distributions_with_cr(workspace, tmp_path):
    manifest = json.loads((workspace / "test" / "manifest.json").read_text())
    scene_file = workspace / "test" / manifest["scenes"][0]
    out = tmp_path / "graph.json"
    assert run(["predict", "--scene", scene_file, "--checkpoint", workspace / "ckpt.bin",
                "--stats", workspace / "stats.json", "--out", out]) == 0
    doc = json.loads(out.read_text())
    assert doc["nodes"] and doc["edges"]
    for node in doc["nodes"]:
        assert set(node) >= {"node_id", "class", "confidence", "distribution",
                             "base_distribution"}
        assert abs(sum(node["distribution"]) - 1.0) < 1e-9
    for edge in doc["edges"]:
        assert set(edge) >= {"src", "dst", "predicate", "confidence", "distribution"}


def test_predict_without_cr_omits_base_distribution(workspace, tmp_path):
    manifest = json.loads((workspace / "test" / "manifest.json").read_text())
    scene_file = workspace / "test" / manifest["scenes"][0]
    out = tmp_path / "graph_nocr.json"
    assert run(["predict", "--scene", scene_file, "--checkpoint", workspace / "ckpt.bin",
                "--no-cr", "--out", out]) == 0
    doc = json.loads(out.read_text())
    assert all("base_distribution" not in n for n in doc["nodes"])


def test_errors_exit_nonzero_with_parsable_line(workspace, capsys):
    assert run(["eval", "--corpus", "/nonexistent", "--checkpoint",
                workspace / "ckpt.bin", "--no-cr"]) == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("SceneFormatError:")

    assert run(["eval", "--corpus", workspace / "test", "--checkpoint",
                workspace / "ckpt.bin"]) == 1  # CR on but no stats
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("ConfigError:")


def test_config_file_and_flag_precedence(workspace, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("h=12\nlayers=1\nepochs=2\npatience=2\ngeo_max_points=16\nseed=0\n")
    assert run(["train", "--corpus", workspace / "train", "--out",
                tmp_path / "from_cfg.bin", "--config", cfg, "--epochs", 1]) == 0
    # flag --epochs=1 must override the config value

    bad = tmp_path / "bad.cfg"
    bad.write_text("not_a_key=3\n")
    assert run(["train", "--corpus", workspace / "train", "--out",
                tmp_path / "x.bin", "--config", bad]) == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("ConfigError:")


def test_invalid_fixed_alpha_rejected(workspace, capsys):
    assert run(["eval", "--corpus", workspace / "test", "--checkpoint",
                workspace / "ckpt.bin", "--stats", workspace / "stats.json",
                "--fixed-alpha", 1.7]) == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    assert err.startswith("ValueError:")
