import json
import re

import numpy as np
import pytest

from roadscan import cli, imaging, network as N
from roadscan.data import gen_synthetic_dataset


class TestParser:
    def test_version(self, capsys):
        with pytest.raises(SystemExit) as exc:
            cli.main(["--version"])
        assert exc.value.code == 0
        assert re.match(r"\d+\.\d+\.\d+", capsys.readouterr().out.strip())

    def test_missing_subcommand_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main([])
        assert exc.value.code == cli.EXIT_USAGE

    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as exc:
            cli.main(["synth", "--frobnicate"])
        assert exc.value.code == cli.EXIT_USAGE


class TestSynth:
    def test_writes_dataset_and_manifest(self, tmp_path, capsys):
        out = tmp_path / "ds"
        code = cli.main(
            ["synth", "--out", str(out), "--per-class", "2", "--side", "32"]
        )
        assert code == cli.EXIT_OK
        assert "wrote 4 images" in capsys.readouterr().out
        assert len(list((out / "normal").glob("*.png"))) == 2
        manifest = json.loads((out / "dataset.manifest.json").read_text())
        assert manifest["command"] == "synth"
        assert manifest["outputs"]["files"] == 4

    def test_bad_side_is_usage_error(self, tmp_path, capsys):
        code = cli.main(
            ["synth", "--out", str(tmp_path / "x"), "--per-class", "1", "--side", "8"]
        )
        assert code == cli.EXIT_USAGE
        assert "error:" in capsys.readouterr().err

    def test_seed_env_override(self, tmp_path, monkeypatch):
        a = tmp_path / "a"
        cli.main(["synth", "--out", str(a), "--per-class", "1", "--seed", "1"])
        monkeypatch.setenv("ROADSCAN_SEED", "1")
        b = tmp_path / "b"
        cli.main(["synth", "--out", str(b), "--per-class", "1", "--seed", "7"])
        fa = sorted(a.rglob("*.png"))[0]
        fb = sorted(b.rglob("*.png"))[0]
        assert fa.read_bytes() == fb.read_bytes()
        manifest = json.loads((b / "dataset.manifest.json").read_text())
        assert manifest["seed_env_override"] is True
        assert manifest["seed"] == 1


class TestTrain:
    def test_checkpoint_history_manifest(self, tiny_checkpoint):
        assert tiny_checkpoint.exists()
        hist = tiny_checkpoint.with_suffix(".ckpt.history.csv")
        lines = hist.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,seconds"
        assert len(lines) >= 2
        manifest = json.loads(
            (tiny_checkpoint.parent / "tiny.ckpt.manifest.json").read_text()
        )
        assert manifest["command"] == "train"
        assert manifest["config"]["seed"] == 11

    def test_checkpoint_loads_with_threshold(self, tiny_checkpoint):
        model = N.load_checkpoint(tiny_checkpoint)
        assert model.threshold is not None
        assert model.input_mode == "raw"

    def test_missing_data_dir_usage(self, tmp_path, capsys):
        code = cli.main(
            ["train", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "m.ckpt")]
        )
        assert code == cli.EXIT_USAGE

    def test_too_few_images_usage(self, tmp_path, capsys):
        gen_synthetic_dataset(2, 32, 0, tmp_path / "d")
        code = cli.main(
            ["train", "--data", str(tmp_path / "d"), "--out", str(tmp_path / "m.ckpt")]
        )
        assert code == cli.EXIT_USAGE
        assert "usable images" in capsys.readouterr().err

    def test_bad_config_usage(self, tmp_path):
        cfg = tmp_path / "c.json"
        cfg.write_text('{"loss_kind": "nope"}')
        code = cli.main(
            [
                "train", "--data", str(tmp_path), "--config", str(cfg),
                "--out", str(tmp_path / "m.ckpt"),
            ]
        )
        assert code == cli.EXIT_USAGE


class TestEval:
    def test_report_and_curves(self, tiny_checkpoint, tiny_test_dataset, tmp_path, capsys):
        report = tmp_path / "report.json"
        code = cli.main(
            [
                "eval", "--model", str(tiny_checkpoint),
                "--data", str(tiny_test_dataset),
                "--report", str(report),
                "--curves", str(tmp_path / "m"),
                "--plot", str(tmp_path / "curves.svg"),
            ]
        )
        assert code == cli.EXIT_OK
        out = capsys.readouterr().out
        assert "auroc=" in out and "eer=" in out
        parsed = json.loads(report.read_text())
        assert 0.0 <= parsed["auroc"] <= 1.0
        assert parsed["n_genuine"] == 2 * (6 * 5 // 2)
        assert parsed["n_imposter"] == 36
        assert (tmp_path / "m_roc.csv").exists()
        assert (tmp_path / "m_pr.csv").exists()
        assert (tmp_path / "curves.svg").read_text().startswith("<svg")

    def test_missing_checkpoint_usage(self, tiny_test_dataset, tmp_path):
        code = cli.main(
            [
                "eval", "--model", str(tmp_path / "none.ckpt"),
                "--data", str(tiny_test_dataset),
                "--report", str(tmp_path / "r.json"),
            ]
        )
        assert code == cli.EXIT_USAGE

    def test_corrupt_checkpoint_usage(self, tiny_checkpoint, tiny_test_dataset, tmp_path, capsys):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"XXXX" + tiny_checkpoint.read_bytes()[4:])
        code = cli.main(
            [
                "eval", "--model", str(bad),
                "--data", str(tiny_test_dataset),
                "--report", str(tmp_path / "r.json"),
            ]
        )
        assert code == cli.EXIT_USAGE
        assert "magic" in capsys.readouterr().err


class TestClassify:
    def test_labels_an_image(self, tiny_checkpoint, tiny_dataset, tiny_test_dataset, capsys):
        image = sorted((tiny_test_dataset / "potholes").glob("*.png"))[0]
        code = cli.main(
            [
                "classify", "--model", str(tiny_checkpoint),
                "--gallery", str(tiny_dataset),
                "--image", str(image),
            ]
        )
        assert code == cli.EXIT_OK
        line = capsys.readouterr().out.strip().splitlines()[-1]
        payload = json.loads(line)
        assert payload["label"] in ("normal", "pothole")
        assert set(payload["evidence"]) == {"normal", "pothole"}
        assert isinstance(payload["threshold"], float)

    def test_missing_image_usage(self, tiny_checkpoint, tiny_dataset, tmp_path):
        code = cli.main(
            [
                "classify", "--model", str(tiny_checkpoint),
                "--gallery", str(tiny_dataset),
                "--image", str(tmp_path / "ghost.png"),
            ]
        )
        assert code == cli.EXIT_USAGE

    def test_undecodable_image_usage(self, tiny_checkpoint, tiny_dataset, tmp_path, capsys):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"this is not an image")
        code = cli.main(
            [
                "classify", "--model", str(tiny_checkpoint),
                "--gallery", str(tiny_dataset),
                "--image", str(bad),
            ]
        )
        assert code == cli.EXIT_USAGE
        assert "cannot decode" in capsys.readouterr().err


class TestVerify:
    def test_single_suite_passes(self, capsys):
        code = cli.main(["verify", "--suite", "pairs"])
        assert code == cli.EXIT_OK
        assert "PASS" in capsys.readouterr().out

    def test_fault_injection_fails_with_exit_4(self, capsys):
        code = cli.main(
            ["verify", "--suite", "gradcheck", "--perturb-gradient", "dense"]
        )
        assert code == cli.EXIT_VERIFY
        captured = capsys.readouterr()
        assert "FAIL" in captured.out
        assert "verification failed" in captured.err


class TestPreprocess:
    def test_raw_mode_shape_and_range(self):
        rng = np.random.default_rng(0)
        img = imaging.ImageBuffer(20, 20, 3, rng.random((20, 20, 3)))
        x = cli.preprocess_sample(img, 16, "raw")
        assert x.shape == (3, 16, 16)
        assert x.dtype == np.float32
        assert x.min() >= -1.0 and x.max() <= 1.0

    def test_grayscale_input_broadcast_to_rgb(self):
        img = imaging.ImageBuffer(8, 8, 1, np.full((8, 8, 1), 0.25))
        x = cli.preprocess_sample(img, 8, "raw")
        assert x.shape == (3, 8, 8)
        np.testing.assert_allclose(x, -0.5, atol=1e-6)

    def test_otsu_mode_is_binary_single_channel(self):
        rng = np.random.default_rng(1)
        arr = np.where(rng.random((16, 16, 3)) < 0.5, 0.1, 0.9)
        img = imaging.ImageBuffer(16, 16, 3, arr)
        x = cli.preprocess_sample(img, 16, "otsu_binary")
        assert x.shape == (1, 16, 16)
        assert set(np.unique(x)) <= {-1.0, 1.0}
