from pathlib import Path

import pytest

from mgfusion.cli import main
from mgfusion.config import ConfigError, RunConfig, load_config, parse_config_text

SMALL = """\
dataset.num_classes = 4
dataset.train_classes = 3
dataset.val_classes = 0
dataset.test_classes = 1
dataset.videos_per_class = 4
dataset.feature_dim = 6
dataset.video_length_range = 12,20
dataset.action_length_range = 4,8
train.T = 6
train.batch_size = 4
train.epochs = 2
"""


@pytest.fixture
def small(tmp_path):
    cfg = tmp_path / "small.txt"
    cfg.write_text(SMALL)
    assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "data")]) == 0
    return cfg, tmp_path / "data" / "manifest.txt"


def run(*argv):
    return main([str(a) for a in argv])


def test_gen_data_default_size(tmp_path):
    assert run("gen-data", "--out", tmp_path) == 0
    assert len(list((tmp_path / "videos").glob("*.feat"))) == 200
    assert (tmp_path / "config.txt").exists()


def test_gen_data_is_idempotent(small, tmp_path):
    cfg, manifest = small
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "again") == 0
    for f in sorted((manifest.parent / "videos").iterdir()):
        assert f.read_bytes() == (tmp_path / "again" / "videos" / f.name).read_bytes()


def test_gen_data_bad_range_names_field(tmp_path, capsys):
    code = run("gen-data", "--out", tmp_path, "--set", "dataset.video_length_range=30,10")
    assert code == 1
    assert "video_length_range" in capsys.readouterr().err


def test_train_eval_flow(small, tmp_path):
    cfg, manifest = small
    out = tmp_path / "run"
    assert run("train", "--config", cfg, "--corpus", manifest, "--out", out) == 0
    for name in ("checkpoint.txt", "loss_history.csv", "config.txt"):
        assert (out / name).exists()
    assert run("eval", "--config", cfg, "--corpus", manifest, "--out", out,
               "--thresholds", "0.5,0.7,0.9", "--baseline", "frame") == 0
    assert len((out / "report.csv").read_text().splitlines()) == 4
    assert (out / "report_frame.csv").exists()
    summary = (out / "summary.csv").read_text().splitlines()
    assert summary[0] == "method,threshold,map" and len(summary) == 7
    first = (out / "report.csv").read_bytes()
    assert run("eval", "--config", cfg, "--corpus", manifest, "--out", out,
               "--thresholds", "0.5,0.7,0.9", "--baseline", "frame") == 0
    assert (out / "report.csv").read_bytes() == first


def test_resolved_config_reproduces_run(small, tmp_path):
    cfg, manifest = small
    a, b = tmp_path / "a", tmp_path / "b"
    assert run("train", "--config", cfg, "--corpus", manifest, "--out", a, "--seed", 3) == 0
    assert run("train", "--config", a / "config.txt", "--out", b) == 0
    assert (a / "checkpoint.txt").read_bytes() == (b / "checkpoint.txt").read_bytes()


def test_cnn_variant(small, tmp_path):
    cfg, manifest = small
    out = tmp_path / "cnn"
    assert run("train", "--config", cfg, "--corpus", manifest, "--out", out, "--variant", "cnn") == 0
    assert run("eval", "--config", cfg, "--corpus", manifest, "--out", out, "--variant", "cnn") == 0


def test_missing_corpus(tmp_path, capsys):
    assert run("train", "--corpus", tmp_path / "nope", "--out", tmp_path) == 1
    assert "corpus not found" in capsys.readouterr().err


def test_checkpoint_mismatch_names_parameter(small, tmp_path, capsys):
    cfg, manifest = small
    out = tmp_path / "run"
    assert run("train", "--config", cfg, "--corpus", manifest, "--out", out) == 0
    code = run("eval", "--config", cfg, "--corpus", manifest, "--out", out, "--set", "model.hidden=4")
    assert code == 1
    assert "lstm.W_x" in capsys.readouterr().err


def test_baseline_command(small, tmp_path):
    cfg, manifest = small
    out = tmp_path / "base"
    assert run("baseline", "--config", cfg, "--corpus", manifest, "--out", out) == 0
    assert (out / "report_chance.csv").exists() and (out / "report_frame.csv").exists()


def test_ablate_grid(small, tmp_path):
    cfg, manifest = small
    out = tmp_path / "abl"
    assert run("ablate", "--config", cfg, "--corpus", manifest, "--out", out, "--epochs", 1,
               "--thresholds", "0.5") == 0
    rows = (out / "ablation.csv").read_text().splitlines()
    assert rows[0] == "n,k,map@0.5" and len(rows) == 10
    assert load_config(out / "n2_k3" / "config.txt").train.ks == (1, 2, 3)
    assert load_config(out / "n1_k2" / "config.txt").train.L == 1


class TestConfig:
    def test_roundtrip(self):
        c = RunConfig()
        c.set("train.ks", "1,3")
        c.set("model.variant", "cnn")
        again = parse_config_text(c.dumps())
        assert again.dumps() == c.dumps() and again.train.ks == (1, 3)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="line 2"):
            parse_config_text("train.T = 8\ntrain.bogus = 1\n")

    def test_derived_model_keys_rejected(self):
        with pytest.raises(ConfigError):
            RunConfig().set("model.input_dim", "7")

    def test_bad_value(self):
        with pytest.raises(ConfigError, match="train.T"):
            RunConfig().set("train.T", "many")

    def test_comments_and_blanks(self):
        c = parse_config_text("# header\n\ntrain.T = 8  # short\n")
        assert c.train.T == 8


def test_package_entry_point_is_declared():
    text = (Path(__file__).resolve().parents[1] / "pyproject.toml").read_text()
    assert 'mgfusion = "mgfusion.cli:main"' in text
