import json

import numpy as np
import pytest

from lrfr.cli import Command, dispatch, main, parse_args
from lrfr.datagen import DatasetSpec, generate_dataset
from lrfr.imageops import write_png

TINY = """\
[data]
n_identities = 4
images_per_identity = 6
input_size = 32
seed = 1
[model]
channel_widths = 4, 8
embedding_dim = 8
[loss]
cosface_s = 16
cosface_m = 0.2
[augment]
plan = 8:1, 16:1
[optim]
epochs = 2
batch_size = 8
lr = 0.003
milestones = 1
dtype = float64
"""


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["train", "--config", str(cfg), "--out", str(root / "model")]) == 0
    return cfg, root / "model" / "final.lrfr"


class TestParse:
    def test_train(self):
        cmd = parse_args(["train", "--config", "c.cfg"])
        assert cmd.name == "train" and str(cmd.config) == "c.cfg" and cmd.seed is None

    def test_seed_override(self):
        assert parse_args(["train", "--config", "c.cfg", "--seed", "7"]).seed == 7

    def test_resolutions(self):
        cmd = parse_args(["sweep-accuracy", "--checkpoint", "m.lrfr", "--resolutions", "7,14,20"])
        assert cmd.resolutions == (7, 14, 20) and cmd.pairs == 600

    @pytest.mark.parametrize("argv", [["bogus"], [], ["train"], ["train", "--config", "c", "--frobnicate"],
                                      ["sweep-accuracy"], ["sweep-accuracy", "--checkpoint", "m", "--resolutions",
                                                           "7,x"], ["eval", "--checkpoint", "m", "--pairs", "0"]])
    def test_usage_errors_exit_2(self, argv, capsys):
        assert main(argv) == 2
        assert "usage" in capsys.readouterr().err


class TestCommands:
    def test_gen_data(self, tmp_path):
        cfg = tmp_path / "c.cfg"
        cfg.write_text("[data]\nn_identities = 2\nimages_per_identity = 2\ninput_size = 16\n")
        assert main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / "d")]) == 0
        rows = (tmp_path / "d" / "manifest.txt").read_text().split()
        assert len(rows) == 4
        assert len(list((tmp_path / "d").glob("*/*.png"))) == 4

    def test_malformed_config(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("[optim]\nlr = fast\n")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == 1
        err = capsys.readouterr().err
        assert "[optim]" in err and "lr" in err

    def test_missing_checkpoint(self, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(tmp_path / "none.lrfr"), "--out", str(tmp_path)]) == 1
        assert "none.lrfr" in capsys.readouterr().err

    def test_bad_thread_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("LRFR_THREADS", "zero")
        assert dispatch(Command("gen-data", out=tmp_path)) == 2

    def test_grad_check(self, capsys):
        assert main(["grad-check", "--seeds", "2"]) == 0
        out = capsys.readouterr().out
        assert "network" in out and "FAIL" not in out

    def test_augment(self, tmp_path, capsys):
        img = generate_dataset(DatasetSpec(2, 2, input_size=32)).images[0]
        write_png(tmp_path / "face.png", img)
        code = main(["augment", str(tmp_path / "face.png"), "--resolutions", "8,16", "--out", str(tmp_path / "o")])
        assert code == 0
        rows = json.loads((tmp_path / "o" / "augment.json").read_text())
        assert [r["resolution"] for r in rows] == [8, 16]
        assert rows[0]["difficulty"] == "extremely_hard" and rows[1]["difficulty"] == "hard"
        assert rows[0]["ssim"] < rows[1]["ssim"] <= 1
        assert (tmp_path / "o" / "face_8px.png").exists()


class TestPipeline:
    def test_train_outputs(self, trained):
        _, ckpt = trained
        assert ckpt.exists() and (ckpt.parent / "trainlog.jsonl").exists()

    def test_sweep_accuracy(self, trained, tmp_path):
        cfg, ckpt = trained
        argv = ["sweep-accuracy", "--config", str(cfg), "--checkpoint", str(ckpt), "--resolutions", "8,16,32",
                "--pairs", "20", "--out", str(tmp_path)]
        assert main(argv) == 0
        lines = (tmp_path / "accuracy_model_1.csv").read_text().splitlines()
        assert lines[0] == "resolution,accuracy" and len(lines) == 4

    @pytest.mark.parametrize("command, files", [
        ("sweep-gradnorm", ["gradnorm_model_1.csv"]),
        ("sim-hist", ["simhist8_model_1.csv", "simhist32_model_1.json"]),
        ("dim-error", ["dimerror8_model_1.json"]),
        ("pca", ["pca_model_1.csv"]),
        ("eval", ["accuracy_model_1.json"]),
    ])
    def test_analysis_commands(self, trained, tmp_path, command, files):
        cfg, ckpt = trained
        argv = [command, "--config", str(cfg), "--checkpoint", str(ckpt), "--out", str(tmp_path)]
        if command != "eval":
            argv += ["--resolutions", "8,32"]
        if command in ("eval", "sim-hist"):
            argv += ["--pairs", "20"]
        assert main(argv) == 0
        for name in files:
            assert (tmp_path / name).exists()
        assert not list(tmp_path.glob("*.tmp"))

    def test_resolution_above_input(self, trained, tmp_path, capsys):
        cfg, ckpt = trained
        argv = ["sweep-accuracy", "--config", str(cfg), "--checkpoint", str(ckpt), "--resolutions", "64",
                "--out", str(tmp_path)]
        assert main(argv) == 1
        assert "64" in capsys.readouterr().err

    def test_rerun_identical(self, trained, tmp_path):
        cfg, _ = trained
        for name in ("a", "b"):
            assert main(["train", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        for f in ("final.lrfr", "trainlog.jsonl", "trainlog.csv", "epoch001.lrfr"):
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
        ckpt = tmp_path / "a" / "final.lrfr"
        outs = []
        for name in ("ra", "rb"):
            argv = ["sweep-accuracy", "--config", str(cfg), "--checkpoint", str(ckpt), "--resolutions", "8,32",
                    "--pairs", "20", "--out", str(tmp_path / name), "--model-id", "m"]
            assert main(argv) == 0
            outs.append((tmp_path / name / "accuracy_m_1.json").read_bytes())
        assert outs[0] == outs[1]

    def test_seed_override_changes_run(self, trained, tmp_path):
        cfg, ckpt = trained
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "s"), "--seed", "5"]) == 0
        assert (tmp_path / "s" / "final.lrfr").read_bytes() != ckpt.read_bytes()
