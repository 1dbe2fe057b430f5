"""CLI surface: exit codes, config-file handling, small end-to-end flows.

The expensive full-grid path is covered by the acceptance suite; here the
commands run on deliberately tiny datasets and models.
"""

import json
import os

import numpy as np
import pytest

from fmarobust import cli
from fmarobust import model as M
from fmarobust import report as R
from fmarobust import train as TR
from fmarobust.augment import load_presets, write_manifest


def run(argv):
    return cli.main(argv)


def tiny_flags(tmp_path, train=3, val=2):
    return ["--out-dir", str(tmp_path), "--train-per-class", str(train),
            "--val-per-class", str(val), "--batch-size", "16"]


@pytest.fixture()
def baseline_path(tmp_path):
    """A trained-for-one-epoch snapshot to feed into other commands."""
    code = run(["train-baseline", "--epochs", "1", "--lr-schedule", "0.02:1"]
               + tiny_flags(tmp_path))
    assert code == 0
    path = tmp_path / "baseline.snap"
    assert path.exists()
    return str(path)


@pytest.fixture()
def augs_path(tmp_path):
    presets = {name: spec for name, spec in load_presets().items()
               if name.startswith("cifar10/")}
    path = tmp_path / "augs.cfg"
    write_manifest(presets, path)
    return str(path)


class TestExitCodes:
    def test_usage_error_is_one(self):
        assert run([]) == 1
        assert run(["finetune"]) == 1          # missing required flags
        assert run(["eval", "--bogus"]) == 1

    def test_data_error_is_two(self, tmp_path):
        assert run(["eval", "--model", str(tmp_path / "missing.snap")]) == 2

    def test_corrupt_snapshot_is_two(self, tmp_path):
        bad = tmp_path / "bad.snap"
        bad.write_bytes(b"not a snapshot")
        assert run(["eval", "--model", str(bad)]) == 2


class TestFlows:
    def test_eval_clean(self, baseline_path, tmp_path, capsys):
        code = run(["eval", "--model", baseline_path]
                   + tiny_flags(tmp_path))
        assert code == 0
        out = capsys.readouterr().out
        assert out.startswith("clean:")

    def test_eval_augmented_condition(self, baseline_path, augs_path,
                                      tmp_path, capsys):
        code = run(["eval", "--model", baseline_path, "--augs", augs_path,
                    "--condition", "gaussian_noise"] + tiny_flags(tmp_path))
        assert code == 0
        assert "gaussian_noise:" in capsys.readouterr().out

    def test_finetune_writes_snapshot_and_manifest(self, baseline_path,
                                                   augs_path, tmp_path):
        code = run(["finetune", "--model", baseline_path, "--augs", augs_path,
                    "--method", "fma", "--strategy", "ca", "--gamma", "0.1",
                    "--epochs", "2", "--eval-subset", "4"]
                   + tiny_flags(tmp_path))
        assert code == 0
        assert (tmp_path / "fma_ca_seed0.snap").exists()
        manifest = TR.RunManifest.load(tmp_path / "fma_ca_seed0_manifest.json")
        assert [r["set"] for r in manifest.epochs] == [
            "combined_plus", "combined_minus"]

    def test_report_from_manifest(self, baseline_path, augs_path, tmp_path):
        run(["finetune", "--model", baseline_path, "--augs", augs_path,
             "--method", "fma", "--epochs", "1", "--eval-subset", "4"]
            + tiny_flags(tmp_path))
        code = run(["report", "--run-manifest",
                    str(tmp_path / "fma_ca_seed0_manifest.json"),
                    "--augs", augs_path] + tiny_flags(tmp_path))
        assert code == 0
        assert (tmp_path / "curves.csv").exists()
        assert (tmp_path / "curves.svg").exists()
        samples = os.listdir(tmp_path / "samples")
        assert len(samples) == 10
        csv_text = (tmp_path / "curves.csv").read_text()
        assert len(csv_text.strip().splitlines()) == 1 + 1   # header + 1 epoch

    def test_augment_roundtrip(self, tmp_path):
        src = tmp_path / "in.png"
        dst = tmp_path / "out.png"
        R.image_to_png(np.random.default_rng(0).random((8, 8, 3)), src)
        code = run(["augment", "--input", str(src), "--output", str(dst),
                    "--preset", "cifar10/brightness_plus"])
        assert code == 0
        img = R.png_to_image(dst)
        assert img.shape == (8, 8, 3)

    def test_augment_needs_a_spec_source(self, tmp_path):
        src = tmp_path / "in.png"
        R.image_to_png(np.zeros((4, 4, 3)), src)
        assert run(["augment", "--input", str(src),
                    "--output", str(tmp_path / "o.png")]) == 2

    def test_grid_search_gamma(self, baseline_path, augs_path, tmp_path,
                               capsys):
        code = run(["grid-search-gamma", "--model", baseline_path,
                    "--augs", augs_path, "--grid", "0.1", "--epochs", "1"]
                   + tiny_flags(tmp_path))
        assert code == 0
        assert "best gamma: 0.1" in capsys.readouterr().out
        table = json.loads((tmp_path / "search_gamma.json").read_text())
        assert len(table["rows"]) == 1


class TestConfigFile:
    def test_config_supplies_defaults_flags_override(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("train-per-class=3\nval-per-class=2\nepochs=1\n"
                       "lr-schedule=0.02:1\nbatch-size=16\n")
        code = run(["train-baseline", "--config", str(cfg),
                    "--out-dir", str(tmp_path)])
        assert code == 0
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["config"]["epochs"] == 1
        assert manifest["dataset"]["size"] == 30   # 3 per class x 10 classes

    def test_missing_config_is_data_error(self, tmp_path):
        assert run(["train-baseline", "--config",
                    str(tmp_path / "nope.cfg")]) == 2
